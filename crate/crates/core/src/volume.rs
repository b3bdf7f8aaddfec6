//! SUV and label volumes plus the `.pvol` container.
//!
//! Layout on disk:
//!
//! ```text
//! PVOL1\n
//! {"dims":[nx,ny,nz],"voxel_mm":[dx,dy,dz],"dtype":"f32le","kind":"suv"}\n
//! 0x00
//! <payload, little-endian, x fastest>
//! ```
//!
//! Label volumes use `"dtype":"u8","kind":"label"` and carry `num_classes`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"PVOL1\n";

/// Largest class count representable with a u8 payload (indices 0..=254).
pub const MAX_CLASSES: usize = 255;

/// Voxel counts and spacing shared by paired volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    /// `[dx, dy, dz]` in millimetres
    pub voxel_mm: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], voxel_mm: [f64; 3]) -> Result<Self> {
        let g = Geometry { dims, voxel_mm };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::format("dims", format!("every dimension must be >= 1, got {:?}", self.dims)));
        }
        if self.voxel_mm.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::format("voxel_mm", format!("spacing must be positive, got {:?}", self.voxel_mm)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index with x fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Voxel volume in millilitres.
    pub fn voxel_ml(&self) -> f64 {
        self.voxel_mm.iter().product::<f64>() / 1000.0
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Geometry(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Dense SUV volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::format(
                "payload",
                format!("expected {} values for dims {:?}, got {}", geometry.len(), geometry.dims, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::format("data", format!("voxel {i} holds invalid SUV {}", data[i])));
        }
        Ok(Volume3D { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        Volume3D::new(geometry, vec![value; geometry.len()])
    }

    /// Builds a volume from f64 values, clamping negatives to zero.
    pub fn from_f64(geometry: Geometry, values: &[f64]) -> Result<Self> {
        Volume3D::new(geometry, values.iter().map(|&v| v.max(0.0) as f32).collect())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Single-channel tensor `[1, nz, ny, nx]`.
    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.geometry.dims;
        Tensor::from_vec(&[1, nz, ny, nx], self.to_f64())
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Dense class-index volume; index 0 is background, 1 is lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if !(2..=MAX_CLASSES).contains(&num_classes) {
            return Err(Error::format("num_classes", format!("must lie in [2, {MAX_CLASSES}], got {num_classes}")));
        }
        if data.len() != geometry.len() {
            return Err(Error::format(
                "payload",
                format!("expected {} labels for dims {:?}, got {}", geometry.len(), geometry.dims, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::format("data", format!("voxel {i} has class {} >= {num_classes}", data[i])));
        }
        Ok(LabelVolume { geometry, num_classes, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Total classes including background (`S + 1`).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Largest class index `S`.
    pub fn max_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn count(&self, class: usize) -> usize {
        self.data.iter().filter(|&&v| v as usize == class).count()
    }
}

/// Ordered class names: 0 = background, 1 = lesion, then organs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRoster {
    names: Vec<String>,
}

pub const DEFAULT_ORGANS: [&str; 7] = ["liver", "lung", "bone", "muscle", "kidney", "spleen", "aorta"];

impl ClassRoster {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 || names.len() > MAX_CLASSES {
            return Err(Error::Config(format!("class roster needs 2..={MAX_CLASSES} entries, got {}", names.len())));
        }
        if names[1] != "lesion" {
            return Err(Error::Config(format!("class 1 must be 'lesion', got '{}'", names[1])));
        }
        Ok(ClassRoster { names })
    }

    /// Background, lesion and the first `organs` entries of the default organ list.
    pub fn with_organs(organs: usize) -> Result<Self> {
        if organs > DEFAULT_ORGANS.len() {
            return Err(Error::Config(format!("at most {} default organs, asked for {organs}", DEFAULT_ORGANS.len())));
        }
        let mut names = vec!["background".to_string(), "lesion".to_string()];
        names.extend(DEFAULT_ORGANS[..organs].iter().map(|s| s.to_string()));
        ClassRoster::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }
}

impl Default for ClassRoster {
    fn default() -> Self {
        ClassRoster::with_organs(DEFAULT_ORGANS.len()).expect("default roster is valid")
    }
}

/// Binary mask (1 where `labels == s`) on the label geometry.
pub fn one_hot_mask(labels: &LabelVolume, s: usize) -> Result<Volume3D> {
    if s > labels.max_class() {
        return Err(Error::ClassIndex { index: s, max: labels.max_class() });
    }
    let data = labels.data.iter().map(|&v| if v as usize == s { 1.0 } else { 0.0 }).collect();
    Volume3D::new(labels.geometry, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    voxel_mm: [f64; 3],
    dtype: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_classes: Option<usize>,
}

/// Either payload kind of a `.pvol` file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Suv(Volume3D),
    Label(LabelVolume),
}

fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_string(header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 2 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.push(0);
    out.extend_from_slice(payload);
    out
}

pub fn encode_suv(v: &Volume3D) -> Vec<u8> {
    let header = Header {
        dims: v.geometry.dims,
        voxel_mm: v.geometry.voxel_mm,
        dtype: "f32le".into(),
        kind: "suv".into(),
        num_classes: None,
    };
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    encode(&header, &payload)
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let header = Header {
        dims: v.geometry.dims,
        voxel_mm: v.geometry.voxel_mm,
        dtype: "u8".into(),
        kind: "label".into(),
        num_classes: Some(v.num_classes),
    };
    encode(&header, &v.data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyVolume> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::format("magic", "file does not start with PVOL1"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "missing header terminator"))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format("header", e.to_string()))?;
    let rest = &rest[nl + 1..];
    let payload = rest
        .strip_prefix(&[0u8])
        .ok_or_else(|| Error::format("separator", "missing 0x00 separator"))?;
    let geometry = Geometry { dims: header.dims, voxel_mm: header.voxel_mm };
    geometry.validate()?;
    let n = geometry.len();
    match (header.kind.as_str(), header.dtype.as_str()) {
        ("suv", "f32le") => {
            if payload.len() != n * 4 {
                return Err(Error::format(
                    "payload",
                    format!("dims {:?} need {} bytes, found {}", header.dims, n * 4, payload.len()),
                ));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Volume3D::new(geometry, data).map(AnyVolume::Suv)
        }
        ("label", "u8") => {
            if payload.len() != n {
                return Err(Error::format(
                    "payload",
                    format!("dims {:?} need {} bytes, found {}", header.dims, n, payload.len()),
                ));
            }
            let classes = header
                .num_classes
                .ok_or_else(|| Error::format("num_classes", "label volume without num_classes"))?;
            LabelVolume::new(geometry, classes, payload.to_vec()).map(AnyVolume::Label)
        }
        (kind, dtype) => Err(Error::format("dtype", format!("unsupported kind/dtype pair {kind}/{dtype}"))),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_suv(path: impl AsRef<Path>) -> Result<Volume3D> {
    match read_volume(path.as_ref())? {
        AnyVolume::Suv(v) => Ok(v),
        AnyVolume::Label(_) => Err(Error::format("kind", format!("{} holds labels, expected SUV", path.as_ref().display()))),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(path.as_ref())? {
        AnyVolume::Label(v) => Ok(v),
        AnyVolume::Suv(_) => Err(Error::format("kind", format!("{} holds SUV, expected labels", path.as_ref().display()))),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    volume.geometry.validate()?;
    write_bytes(path.as_ref(), &encode_suv(volume))
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    labels.geometry.validate()?;
    write_bytes(path.as_ref(), &encode_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [2.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let g = geom([2, 1, 1]);
        let l = LabelVolume::new(g, 3, vec![1, 2]).unwrap();
        assert_eq!(one_hot_mask(&l, 1).unwrap().data(), &[1.0, 0.0]);
        let all = LabelVolume::new(g, 3, vec![2, 2]).unwrap();
        assert_eq!(one_hot_mask(&all, 2).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(one_hot_mask(&all, 0).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(one_hot_mask(&l, 3), Err(Error::ClassIndex { index: 3, max: 2 })));
    }

    #[test]
    fn round_trip_and_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([4, 4, 4]);
        let v = Volume3D::new(g, (0..64).map(|i| i as f32 * 0.25).collect()).unwrap();
        let (a, b) = (dir.path().join("a.pvol"), dir.path().join("b.pvol"));
        write_volume(&v, &a).unwrap();
        write_volume(&v, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_suv(&a).unwrap(), v);
    }

    #[test]
    fn label_header_uses_u8() {
        let l = LabelVolume::new(geom([2, 2, 1]), 4, vec![0, 1, 2, 3]).unwrap();
        let bytes = encode_labels(&l);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("\"dtype\":\"u8\""));
        assert!(text.contains("\"num_classes\":4"));
        assert_eq!(decode(&bytes).unwrap(), AnyVolume::Label(l));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let v = Volume3D::filled(geom([2, 2, 2]), 1.0).unwrap();
        let bytes = encode_suv(&v);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(truncated), Err(Error::Format { ref field, .. }) if field == "payload"));

        // header says 2x2x2, payload holds 7 values
        let seven = &bytes[..bytes.len() - 4];
        assert!(matches!(decode(seven), Err(Error::Format { ref field, .. }) if field == "payload"));

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode(&bad), Err(Error::Format { ref field, .. }) if field == "magic"));

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(Error::Format { ref field, .. }) if field == "data"));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Geometry::new([0, 2, 2], [1.0; 3]).is_err());
        let bad = Volume3D { geometry: Geometry { dims: [0, 1, 1], voxel_mm: [1.0; 3] }, data: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pvol");
        assert!(write_volume(&bad, &path).is_err());
        assert!(!path.exists());
    }

    proptest! {
        #[test]
        fn suv_round_trip(nx in 1usize..=8, ny in 1usize..=8, nz in 1usize..=8, seed in any::<u64>(), dx in 0.5f64..4.0) {
            let g = Geometry::new([nx, ny, nz], [dx, dx * 1.5, 2.0]).unwrap();
            let data: Vec<f32> = (0..g.len()).map(|i| ((i as u64).wrapping_mul(seed | 1) % 10_000) as f32 / 97.0).collect();
            let v = Volume3D::new(g, data).unwrap();
            let back = decode(&encode_suv(&v)).unwrap();
            prop_assert_eq!(back, AnyVolume::Suv(v));
        }

        #[test]
        fn masks_partition(nx in 1usize..=6, ny in 1usize..=6, classes in 2usize..=9, seed in any::<u64>()) {
            let g = Geometry::new([nx, ny, 2], [1.0; 3]).unwrap();
            let data: Vec<u8> = (0..g.len()).map(|i| ((i as u64 ^ seed) % classes as u64) as u8).collect();
            let l = LabelVolume::new(g, classes, data).unwrap();
            let mut total = vec![0.0f32; g.len()];
            for s in 0..classes {
                for (t, m) in total.iter_mut().zip(one_hot_mask(&l, s).unwrap().data()) {
                    *t += m;
                }
            }
            prop_assert!(total.iter().all(|&t| t == 1.0));
        }
    }
}
