//! Dense volumetric tensors, bit-exact file I/O, dataset manifests, task
//! relabeling, and the synthetic phantom generator.

mod dataset;
mod phantom;

pub use dataset::{
    apply_task, load_manifest, save_manifest, DatasetManifest, Domain, Label, ManifestEntry, Task,
};
pub use phantom::{generate_phantom, Gaussian, GeometrySpec, PhantomParams};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a 4D tensor: feature channels plus three spatial axes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape4 {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(channels: usize, depth: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || depth == 0 || height == 0 || width == 0 {
            return Err(Error::ZeroExtent);
        }
        channels
            .checked_mul(depth)
            .and_then(|n| n.checked_mul(height))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::InvalidParam("shape element count overflows usize".into()))?;
        Ok(Self {
            channels,
            depth,
            height,
            width,
        })
    }

    /// Total number of elements.
    pub fn elements(&self) -> usize {
        self.channels * self.depth * self.height * self.width
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    /// Flat index in channel-major, then z, y, x order.
    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.depth + z) * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.channels, self.depth, self.height, self.width
        )
    }
}

/// Dense 4D array of voxel values, stored channel-major then z, y, x.
///
/// Volumes are immutable once built; every constructor rejects non-finite
/// values, so downstream code can rely on finite data throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.elements()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.elements() {
            return Err(Error::LengthMismatch {
                left: shape.elements(),
                right: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite_scalar()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(c, z, y, x)]
    }

    /// Converts storage precision, keeping values bit-faithful where possible.
    pub fn map_to<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

const VOL3_MAGIC: [u8; 4] = *b"VOL3";

/// Writes a volume in the VOL3 format: magic, four little-endian `u32`
/// extents (channels, depth, height, width), then raw little-endian `f32`
/// voxels in storage order.
pub fn save_volume(v: &Volume<f32>, path: &Path) -> Result<()> {
    if let Some(index) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(&VOL3_MAGIC).map_err(io)?;
    for extent in [
        v.shape.channels,
        v.shape.depth,
        v.shape.height,
        v.shape.width,
    ] {
        let extent = u32::try_from(extent)
            .map_err(|_| Error::InvalidParam(format!("extent {extent} exceeds u32")))?;
        w.write_all(&extent.to_le_bytes()).map_err(io)?;
    }
    for value in &v.data {
        w.write_all(&value.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a VOL3 file back into a volume. Rejects wrong magic, zero extents,
/// and truncated payloads with distinct error kinds.
pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != VOL3_MAGIC {
        return Err(Error::BadMagic {
            expected: VOL3_MAGIC,
            found: magic,
        });
    }

    let mut extents = [0usize; 4];
    for extent in &mut extents {
        let mut buf = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut buf, 16)?;
        *extent = u32::from_le_bytes(buf) as usize;
    }
    if extents.contains(&0) {
        return Err(Error::ZeroExtent);
    }
    let shape = Shape4::new(extents[0], extents[1], extents[2], extents[3])?;

    let expected = shape.elements() * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::from_vec(shape, data)
}

/// Reads the 20-byte VOL3 header only; used for cheap shape validation.
pub fn peek_volume_shape(path: &Path) -> Result<Shape4> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 4)?;
    if magic != VOL3_MAGIC {
        return Err(Error::BadMagic {
            expected: VOL3_MAGIC,
            found: magic,
        });
    }
    let mut extents = [0usize; 4];
    for extent in &mut extents {
        let mut buf = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut buf, 16)?;
        *extent = u32::from_le_bytes(buf) as usize;
    }
    if extents.contains(&0) {
        return Err(Error::ZeroExtent);
    }
    Shape4::new(extents[0], extents[1], extents[2], extents[3])
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], expected: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    expected,
                    found: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => {
                return Err(Error::Io {
                    path: "<stream>".into(),
                    source: e,
                })
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;
    use tempfile::tempdir;

    #[test]
    fn scalar_volume_layout_is_forced_by_the_format() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.vol3");
        let v = Volume::from_vec(Shape4::new(1, 1, 1, 1).unwrap(), vec![0.0f32]).unwrap();
        save_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        // 4 magic + 4 x u32 extents + one f32 voxel.
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"VOL3");
        for slot in 0..4 {
            assert_eq!(&bytes[4 + 4 * slot..8 + 4 * slot], &1u32.to_le_bytes());
        }
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
    }

    #[test]
    fn eight_voxels_is_header_plus_32_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("eight.vol3");
        let shape = Shape4::new(1, 2, 2, 2).unwrap();
        let v = Volume::from_vec(shape, (0..8).map(|i| i as f32).collect()).unwrap();
        save_volume(&v, &path).unwrap();
        // 20-byte header plus 8 voxels x 4 bytes.
        assert_eq!(fs::read(&path).unwrap().len(), 20 + 32);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.vol3");
        let shape = Shape4::new(2, 8, 8, 8).unwrap();
        // Deterministic pseudo-random payload; bit-exactness matters, so
        // compare raw bits rather than float equality.
        let data: Vec<f32> = (0..shape.elements())
            .map(|i| ((i as f32 * 0.137).sin() * 3.7) - 1.0)
            .collect();
        let v = Volume::from_vec(shape, data).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), v.shape());
        let bits_a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.vol3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"XXXX");
        for _ in 0..4 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
        }
        bytes.extend_from_slice(&0f32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.vol3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VOL3");
        for extent in [1u32, 2, 2, 2] {
            bytes.extend_from_slice(&extent.to_le_bytes());
        }
        for _ in 0..7 {
            bytes.extend_from_slice(&1f32.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn zero_extent_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("zero.vol3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VOL3");
        for extent in [1u32, 0, 2, 2] {
            bytes.extend_from_slice(&extent.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::ZeroExtent)));
    }

    #[test]
    fn non_finite_values_are_rejected_with_index() {
        let shape = Shape4::new(1, 1, 1, 3).unwrap();
        let err = Volume::from_vec(shape, vec![0.0f32, f32::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    proptest! {
        #[test]
        fn save_load_identity(
            c in 1usize..3,
            d in 1usize..5,
            h in 1usize..5,
            w in 1usize..5,
            seed in 0u64..1000,
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("prop.vol3");
            let shape = Shape4::new(c, d, h, w).unwrap();
            let data: Vec<f32> = (0..shape.elements())
                .map(|i| (((i as u64 + seed).wrapping_mul(2654435761) % 10007) as f32 / 251.0) - 19.0)
                .collect();
            let v = Volume::from_vec(shape, data).unwrap();
            save_volume(&v, &path).unwrap();
            let back = load_volume(&path).unwrap();
            prop_assert_eq!(back.shape(), v.shape());
            let bits_a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }
}
