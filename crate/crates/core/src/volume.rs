//! Core voxel-grid carriers: scalar volumes, label maps and probability
//! stacks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;

/// Voxel payload of a [`Volume3D`], tagged by dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable dtype tag.
    pub fn dtype_name(&self) -> &'static str {
        match self {
            VoxelData::U8(_) => "uint8",
            VoxelData::I16(_) => "int16",
            VoxelData::F32(_) => "float32",
        }
    }

    /// Value at `index` widened to f64.
    #[inline]
    pub fn get_f64(&self, index: usize) -> f64 {
        match self {
            VoxelData::U8(v) => f64::from(v[index]),
            VoxelData::I16(v) => f64::from(v[index]),
            VoxelData::F32(v) => f64::from(v[index]),
        }
    }
}

/// Immutable scalar voxel grid: geometry plus a dtype-tagged payload.
///
/// Voxels are linearized x-fastest (`index = x + nx * (y + ny * z)`); all
/// kernels in the crate assume this order. Volumes are immutable after
/// construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: VoxelData,
}

impl Volume3D {
    /// Build a volume, validating the geometry invariants and that the data
    /// length equals the voxel count. Float payloads must be finite.
    pub fn new(geometry: Geometry, data: VoxelData) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                geometry.shape,
                geometry.num_voxels()
            )));
        }
        if let VoxelData::F32(values) = &data {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite voxel value at linear index {index}"
                )));
            }
        }
        Ok(Self { geometry, data })
    }

    /// All-zero float32 volume on the given grid.
    pub fn zeros_f32(geometry: Geometry) -> Self {
        let n = geometry.num_voxels();
        Self {
            geometry,
            data: VoxelData::F32(vec![0.0; n]),
        }
    }

    pub fn from_f32(geometry: Geometry, values: Vec<f32>) -> Result<Self> {
        Self::new(geometry, VoxelData::F32(values))
    }

    pub fn from_u8(geometry: Geometry, values: Vec<u8>) -> Result<Self> {
        Self::new(geometry, VoxelData::U8(values))
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn affine(&self) -> [[f64; 4]; 4] {
        self.geometry.affine
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.geometry.num_voxels()
    }

    pub fn is_float(&self) -> bool {
        matches!(self.data, VoxelData::F32(_))
    }

    /// Float view of the payload; integer dtypes are widened.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| f32::from(x)).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| f32::from(x)).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }

    /// Borrow the payload as f32, or None for integer dtypes.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Borrow the payload as u8, or None for other dtypes.
    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// The four annotated tumor sub-regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseRegion {
    #[serde(rename = "NETC")]
    Netc,
    #[serde(rename = "SNFH")]
    Snfh,
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "RC")]
    Rc,
}

impl BaseRegion {
    pub const ALL: [BaseRegion; 4] = [
        BaseRegion::Netc,
        BaseRegion::Snfh,
        BaseRegion::Et,
        BaseRegion::Rc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaseRegion::Netc => "NETC",
            BaseRegion::Snfh => "SNFH",
            BaseRegion::Et => "ET",
            BaseRegion::Rc => "RC",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "NETC" => Some(BaseRegion::Netc),
            "SNFH" => Some(BaseRegion::Snfh),
            "ET" => Some(BaseRegion::Et),
            "RC" => Some(BaseRegion::Rc),
            _ => None,
        }
    }
}

/// Mapping between integer voxel codes and tumor sub-regions.
///
/// The default follows the challenge convention `{1: NETC, 2: SNFH, 3: ET,
/// 4: RC}`; code 0 is always background. The mapping is configurable because
/// released annotations do not pin the codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u8, BaseRegion>")]
#[serde(into = "BTreeMap<u8, BaseRegion>")]
pub struct LabelEncoding {
    code_to_region: BTreeMap<u8, BaseRegion>,
}

impl TryFrom<BTreeMap<u8, BaseRegion>> for LabelEncoding {
    type Error = Error;

    fn try_from(map: BTreeMap<u8, BaseRegion>) -> Result<Self> {
        let pairs: Vec<(u8, BaseRegion)> = map.into_iter().collect();
        Self::new(&pairs)
    }
}

impl From<LabelEncoding> for BTreeMap<u8, BaseRegion> {
    fn from(encoding: LabelEncoding) -> Self {
        encoding.code_to_region
    }
}

impl Default for LabelEncoding {
    fn default() -> Self {
        let mut code_to_region = BTreeMap::new();
        code_to_region.insert(1, BaseRegion::Netc);
        code_to_region.insert(2, BaseRegion::Snfh);
        code_to_region.insert(3, BaseRegion::Et);
        code_to_region.insert(4, BaseRegion::Rc);
        Self { code_to_region }
    }
}

impl LabelEncoding {
    /// Build from explicit code -> region pairs. Code 0 is reserved for
    /// background; duplicate codes or regions are rejected.
    pub fn new(pairs: &[(u8, BaseRegion)]) -> Result<Self> {
        let mut code_to_region = BTreeMap::new();
        let mut seen_regions = Vec::new();
        for &(code, region) in pairs {
            if code == 0 {
                return Err(Error::invalid("label code 0 is reserved for background"));
            }
            if code_to_region.insert(code, region).is_some() {
                return Err(Error::invalid(format!("duplicate label code {code}")));
            }
            if seen_regions.contains(&region) {
                return Err(Error::invalid(format!(
                    "region {} mapped to more than one code",
                    region.name()
                )));
            }
            seen_regions.push(region);
        }
        if code_to_region.is_empty() {
            return Err(Error::invalid("label encoding must map at least one code"));
        }
        Ok(Self { code_to_region })
    }

    /// Foreground codes in ascending order.
    pub fn codes(&self) -> Vec<u8> {
        self.code_to_region.keys().copied().collect()
    }

    pub fn region_of(&self, code: u8) -> Option<BaseRegion> {
        self.code_to_region.get(&code).copied()
    }

    pub fn code_of(&self, region: BaseRegion) -> Option<u8> {
        self.code_to_region
            .iter()
            .find(|(_, r)| **r == region)
            .map(|(c, _)| *c)
    }

    pub fn contains_code(&self, code: u8) -> bool {
        code == 0 || self.code_to_region.contains_key(&code)
    }

    /// Class names in stack order: background first, then foreground codes
    /// ascending. This is the channel order of every [`ProbStack`].
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        names.extend(self.code_to_region.values().map(|r| r.name().to_string()));
        names
    }

    /// Number of probability-stack channels (foreground codes + background).
    pub fn num_classes(&self) -> usize {
        self.code_to_region.len() + 1
    }

    /// Voxel code for stack channel `class` (0 = background).
    pub fn code_for_class(&self, class: usize) -> Option<u8> {
        if class == 0 {
            return Some(0);
        }
        self.codes().get(class - 1).copied()
    }

    /// Stack channel for voxel `code`.
    pub fn class_for_code(&self, code: u8) -> Option<usize> {
        if code == 0 {
            return Some(0);
        }
        self.codes().iter().position(|&c| c == code).map(|i| i + 1)
    }
}

/// Integer-coded segmentation over the label taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    volume: Volume3D,
    encoding: LabelEncoding,
}

impl LabelMap {
    /// Wrap a uint8 volume, checking that every voxel code is either 0 or a
    /// key of the encoding.
    pub fn new(volume: Volume3D, encoding: LabelEncoding) -> Result<Self> {
        let codes = match volume.data() {
            VoxelData::U8(v) => v,
            other => {
                return Err(Error::invalid(format!(
                    "label maps must be uint8, got {}",
                    other.dtype_name()
                )))
            }
        };
        if let Some(&bad) = codes.iter().find(|c| !encoding.contains_code(**c)) {
            return Err(Error::UnknownLabelCode { code: bad });
        }
        Ok(Self { volume, encoding })
    }

    pub fn from_codes(geometry: Geometry, codes: Vec<u8>, encoding: LabelEncoding) -> Result<Self> {
        Self::new(Volume3D::from_u8(geometry, codes)?, encoding)
    }

    /// All-background map on the given grid with the default encoding.
    pub fn background(geometry: Geometry) -> Self {
        let n = geometry.num_voxels();
        Self {
            volume: Volume3D {
                geometry,
                data: VoxelData::U8(vec![0; n]),
            },
            encoding: LabelEncoding::default(),
        }
    }

    pub fn volume(&self) -> &Volume3D {
        &self.volume
    }

    pub fn geometry(&self) -> &Geometry {
        self.volume.geometry()
    }

    pub fn encoding(&self) -> &LabelEncoding {
        &self.encoding
    }

    pub fn codes(&self) -> &[u8] {
        self.volume.as_u8().expect("label maps are uint8")
    }

    /// Binary mask of voxels equal to `code`.
    pub fn mask_of_code(&self, code: u8) -> Vec<bool> {
        self.codes().iter().map(|&c| c == code).collect()
    }
}

/// Per-class probability volumes for one model's soft prediction.
///
/// Channel order is background first, then foreground codes ascending (see
/// [`LabelEncoding::class_names`]). At every voxel the channel values lie in
/// [0, 1] and sum to 1 within [`ProbStack::SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    geometry: Geometry,
    channels: Vec<Vec<f32>>,
    encoding: LabelEncoding,
}

impl ProbStack {
    pub const SIMPLEX_TOL: f32 = 1e-4;

    pub fn new(
        geometry: Geometry,
        channels: Vec<Vec<f32>>,
        encoding: LabelEncoding,
    ) -> Result<Self> {
        if channels.len() != encoding.num_classes() {
            return Err(Error::invalid(format!(
                "probability stack has {} channels, encoding expects {}",
                channels.len(),
                encoding.num_classes()
            )));
        }
        let n = geometry.num_voxels();
        if let Some(ch) = channels.iter().find(|ch| ch.len() != n) {
            return Err(Error::invalid(format!(
                "channel length {} does not match {} voxels",
                ch.len(),
                n
            )));
        }
        for i in 0..n {
            let mut sum = 0.0f32;
            for ch in &channels {
                let v = ch[i];
                if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "probability {v} out of [0,1] at linear index {i}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(Error::invalid(format!(
                    "channel probabilities sum to {sum} at linear index {i}"
                )));
            }
        }
        Ok(Self {
            geometry,
            channels,
            encoding,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn encoding(&self) -> &LabelEncoding {
        &self.encoding
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, class: usize) -> &[f32] {
        &self.channels[class]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    /// Voxelwise argmax as a label map; ties go to the lowest class code.
    pub fn argmax_labels(&self) -> LabelMap {
        let n = self.geometry.num_voxels();
        let mut codes = vec![0u8; n];
        for i in 0..n {
            let mut best_class = 0usize;
            let mut best = self.channels[0][i];
            for (class, ch) in self.channels.iter().enumerate().skip(1) {
                if ch[i] > best {
                    best = ch[i];
                    best_class = class;
                }
            }
            codes[i] = self
                .encoding
                .code_for_class(best_class)
                .expect("channel count matches encoding");
        }
        LabelMap {
            volume: Volume3D {
                geometry: self.geometry.clone(),
                data: VoxelData::U8(codes),
            },
            encoding: self.encoding.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_shape() {
        let g = Geometry::isotropic([2, 2, 2]);
        assert!(Volume3D::from_f32(g.clone(), vec![0.0; 7]).is_err());
        assert!(Volume3D::from_f32(g, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn nan_payload_rejected() {
        let g = Geometry::isotropic([2, 1, 1]);
        let err = Volume3D::from_f32(g, vec![0.0, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn default_encoding_matches_challenge_convention() {
        let enc = LabelEncoding::default();
        assert_eq!(enc.region_of(1), Some(BaseRegion::Netc));
        assert_eq!(enc.region_of(2), Some(BaseRegion::Snfh));
        assert_eq!(enc.region_of(3), Some(BaseRegion::Et));
        assert_eq!(enc.region_of(4), Some(BaseRegion::Rc));
        assert_eq!(enc.class_names(), ["background", "NETC", "SNFH", "ET", "RC"]);
    }

    #[test]
    fn labelmap_rejects_codes_outside_encoding() {
        let g = Geometry::isotropic([2, 1, 1]);
        let err = LabelMap::from_codes(g, vec![0, 9], LabelEncoding::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabelCode { code: 9 }));
    }

    #[test]
    fn probstack_enforces_simplex() {
        let g = Geometry::isotropic([1, 1, 1]);
        let enc = LabelEncoding::new(&[(1, BaseRegion::Et)]).unwrap();
        assert!(ProbStack::new(g.clone(), vec![vec![0.6], vec![0.4]], enc.clone()).is_ok());
        assert!(ProbStack::new(g.clone(), vec![vec![0.6], vec![0.6]], enc.clone()).is_err());
        assert!(ProbStack::new(g, vec![vec![1.2], vec![-0.2]], enc).is_err());
    }

    #[test]
    fn argmax_tie_goes_to_lowest_code() {
        let g = Geometry::isotropic([1, 1, 1]);
        let enc = LabelEncoding::default();
        let stack = ProbStack::new(
            g,
            vec![vec![0.0], vec![0.5], vec![0.5], vec![0.0], vec![0.0]],
            enc,
        )
        .unwrap();
        // Codes 1 (NETC) and 2 (SNFH) tie; lowest code wins.
        assert_eq!(stack.argmax_labels().codes(), &[1]);
    }
}
