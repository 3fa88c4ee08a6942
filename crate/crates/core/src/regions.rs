//! Evaluation-region algebra: base labels plus derived composites.
//!
//! Base regions come straight from voxel codes; composites are unions of
//! base regions. The defaults follow the usual challenge convention:
//! `TC = ET ∪ NETC` and `WT = ET ∪ NETC ∪ SNFH` (the resection cavity is in
//! neither composite). Both formulas can be overridden in config.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BaseRegion, LabelEncoding, LabelMap};

/// The six regions reported per case, in report column order.
pub const EVAL_REGIONS: [&str; 6] = ["ET", "NETC", "RC", "SNFH", "TC", "WT"];

/// Composite region definitions: name to the base regions it unions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<BaseRegion>>")]
#[serde(into = "BTreeMap<String, Vec<BaseRegion>>")]
pub struct RegionDefs {
    composites: BTreeMap<String, Vec<BaseRegion>>,
}

impl Default for RegionDefs {
    fn default() -> Self {
        let mut composites = BTreeMap::new();
        composites.insert("TC".to_string(), vec![BaseRegion::Et, BaseRegion::Netc]);
        composites.insert(
            "WT".to_string(),
            vec![BaseRegion::Et, BaseRegion::Netc, BaseRegion::Snfh],
        );
        Self { composites }
    }
}

impl TryFrom<BTreeMap<String, Vec<BaseRegion>>> for RegionDefs {
    type Error = Error;

    fn try_from(composites: BTreeMap<String, Vec<BaseRegion>>) -> Result<Self> {
        RegionDefs::new(composites)
    }
}

impl From<RegionDefs> for BTreeMap<String, Vec<BaseRegion>> {
    fn from(defs: RegionDefs) -> Self {
        defs.composites
    }
}

impl RegionDefs {
    pub fn new(composites: BTreeMap<String, Vec<BaseRegion>>) -> Result<Self> {
        for (name, members) in &composites {
            if BaseRegion::from_name(name).is_some() {
                return Err(Error::invalid(format!(
                    "composite region `{name}` shadows a base region"
                )));
            }
            if members.is_empty() {
                return Err(Error::invalid(format!(
                    "composite region `{name}` has no members"
                )));
            }
        }
        Ok(Self { composites })
    }

    pub fn composite(&self, name: &str) -> Option<&[BaseRegion]> {
        self.composites.get(name).map(Vec::as_slice)
    }

    /// All resolvable region names for an encoding: its base regions in code
    /// order, then composites alphabetically.
    pub fn valid_names(&self, encoding: &LabelEncoding) -> Vec<String> {
        let mut names: Vec<String> = encoding
            .codes()
            .iter()
            .filter_map(|&c| encoding.region_of(c))
            .map(|r| r.name().to_string())
            .collect();
        names.extend(self.composites.keys().cloned());
        names
    }

    /// One line per region, e.g. `TC = union(ET, NETC)`, for audit output.
    pub fn describe(&self, encoding: &LabelEncoding) -> Vec<String> {
        let mut lines: Vec<String> = encoding
            .codes()
            .iter()
            .filter_map(|&c| encoding.region_of(c).map(|r| (c, r)))
            .map(|(c, r)| format!("{} = voxel code {c}", r.name()))
            .collect();
        for (name, members) in &self.composites {
            let parts: Vec<&str> = members.iter().map(BaseRegion::name).collect();
            lines.push(format!("{name} = union({})", parts.join(", ")));
        }
        lines
    }
}

/// Binary mask of the named region. Base regions match their voxel code;
/// composites union their members' codes.
pub fn binarize(map: &LabelMap, region: &str, defs: &RegionDefs) -> Result<Vec<bool>> {
    let encoding = map.encoding();
    let members: Vec<BaseRegion> = if let Some(base) = BaseRegion::from_name(region) {
        if encoding.code_of(base).is_none() {
            return Err(unknown_region(region, defs, encoding));
        }
        vec![base]
    } else if let Some(members) = defs.composite(region) {
        members.to_vec()
    } else {
        return Err(unknown_region(region, defs, encoding));
    };
    let codes: Vec<u8> = members
        .iter()
        .filter_map(|&r| encoding.code_of(r))
        .collect();
    Ok(map.codes().iter().map(|c| codes.contains(c)).collect())
}

fn unknown_region(region: &str, defs: &RegionDefs, encoding: &LabelEncoding) -> Error {
    Error::UnknownRegion {
        name: region.to_string(),
        valid: defs.valid_names(encoding).join(", "),
    }
}
