//! 10–20 electrode labels and their grouping into anatomical regions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Frontal,
    Central,
    Parietal,
    Temporal,
    Occipital,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Frontal,
        Region::Central,
        Region::Parietal,
        Region::Temporal,
        Region::Occipital,
    ];
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Electrode name such as `Fz`, `C3` or `T7`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelLabel(String);

impl ChannelLabel {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let letters = name.chars().take_while(|c| c.is_ascii_alphabetic()).count();
        let suffix = &name[letters..];
        let suffix_ok = suffix.is_empty()
            || suffix.eq_ignore_ascii_case("z")
            || suffix.chars().all(|c| c.is_ascii_digit());
        if letters == 0 || !suffix_ok {
            return Err(Error::UnknownLabel(name));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

// Longest prefixes first.
const PREFIXES: [(&str, Region); 12] = [
    ("FP", Region::Frontal),
    ("AF", Region::Frontal),
    ("FC", Region::Central),
    ("FT", Region::Temporal),
    ("CP", Region::Central),
    ("TP", Region::Temporal),
    ("PO", Region::Occipital),
    ("F", Region::Frontal),
    ("C", Region::Central),
    ("P", Region::Parietal),
    ("T", Region::Temporal),
    ("O", Region::Occipital),
];

/// Region of a 10–20 / 10–10 electrode by its letter prefix. Midline `z`
/// electrodes follow their prefix. Case-insensitive.
pub fn classify_electrode(label: &ChannelLabel) -> Result<Region> {
    let s = label.as_str();
    let letters: String = s
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    // A trailing `Z` belongs to the suffix (`Fz`, `FCz`, `POz`).
    let prefix = if s.len() == letters.len() && letters.len() > 1 && letters.ends_with('Z') {
        &letters[..letters.len() - 1]
    } else {
        letters.as_str()
    };
    PREFIXES
        .iter()
        .find(|(p, _)| *p == prefix)
        .map(|(_, r)| *r)
        .ok_or_else(|| Error::UnknownLabel(s.to_string()))
}

/// Ordered partition of channel indices into regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    regions: Vec<(Region, Vec<usize>)>,
    channels: usize,
}

impl RegionMap {
    /// Builds a map from explicit groups, checking the partition property.
    pub fn from_groups(regions: Vec<(Region, Vec<usize>)>, channels: usize) -> Result<Self> {
        let mut seen = vec![false; channels];
        for (_, idx) in &regions {
            if idx.is_empty() {
                return Err(Error::EmptyRegion);
            }
            for &i in idx {
                if i >= channels || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::ConfigInvalid(format!(
                        "channel {i} out of range or assigned twice"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::ChannelNotInRegion(missing));
        }
        Ok(Self { regions, channels })
    }

    /// Every channel in its own region; used for oracle comparisons.
    pub fn singletons(channels: usize) -> Self {
        Self {
            regions: (0..channels)
                .map(|c| (Region::ALL[c % 5], vec![c]))
                .collect(),
            channels,
        }
    }

    pub fn regions(&self) -> &[(Region, Vec<usize>)] {
        &self.regions
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn channel_lists(&self) -> impl Iterator<Item = &[usize]> {
        self.regions.iter().map(|(_, v)| v.as_slice())
    }

    pub fn max_region_size(&self) -> usize {
        self.regions.iter().map(|(_, v)| v.len()).max().unwrap_or(0)
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.regions.iter().map(|(_, v)| v.len()).collect()
    }

    pub fn region_of(&self, channel: usize) -> Option<Region> {
        self.regions
            .iter()
            .find(|(_, v)| v.contains(&channel))
            .map(|(r, _)| *r)
    }
}

/// Groups channels by region in the fixed region order, keeping input order
/// within a region. Regions without channels are left out.
pub fn build_region_map(labels: &[ChannelLabel]) -> Result<RegionMap> {
    if labels.is_empty() {
        return Err(Error::EmptyChannelList);
    }
    let classes = labels
        .iter()
        .map(classify_electrode)
        .collect::<Result<Vec<_>>>()?;
    let regions = Region::ALL
        .iter()
        .filter_map(|&r| {
            let idx: Vec<usize> = classes
                .iter()
                .enumerate()
                .filter(|(_, c)| **c == r)
                .map(|(i, _)| i)
                .collect();
            (!idx.is_empty()).then_some((r, idx))
        })
        .collect();
    Ok(RegionMap {
        regions,
        channels: labels.len(),
    })
}

pub fn labels(names: &[&str]) -> Result<Vec<ChannelLabel>> {
    names.iter().map(|n| ChannelLabel::new(*n)).collect()
}

/// The 19-electrode 10–20 montage (modern temporal names).
pub const STANDARD_19: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3", "Pz",
    "P4", "P8", "O1", "O2",
];

/// A 64-electrode 10–10 montage.
pub const STANDARD_64: [&str; 64] = [
    "Fp1", "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "Fz", "F2",
    "F4", "F6", "F8", "FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8", "TP9", "TP7", "CP5", "CP3", "CP1", "CPz",
    "CP2", "CP4", "CP6", "TP8", "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3",
    "POz", "PO4", "PO8", "O1", "Oz", "O2",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn region(name: &str) -> Result<Region> {
        classify_electrode(&ChannelLabel::new(name)?)
    }

    #[test]
    fn classify_examples() {
        assert_eq!(region("Fz").unwrap(), Region::Frontal);
        assert_eq!(region("C3").unwrap(), Region::Central);
        assert_eq!(region("T7").unwrap(), Region::Temporal);
    }

    #[test]
    fn boundary_prefixes() {
        assert_eq!(region("Fp1").unwrap(), Region::Frontal);
        assert_eq!(region("FP2").unwrap(), Region::Frontal);
        assert_eq!(region("AF3").unwrap(), Region::Frontal);
        assert_eq!(region("FC1").unwrap(), Region::Central);
        assert_eq!(region("FCz").unwrap(), Region::Central);
        assert_eq!(region("CP4").unwrap(), Region::Central);
        assert_eq!(region("FT7").unwrap(), Region::Temporal);
        assert_eq!(region("TP8").unwrap(), Region::Temporal);
        assert_eq!(region("T3").unwrap(), Region::Temporal);
        assert_eq!(region("PO3").unwrap(), Region::Occipital);
        assert_eq!(region("POz").unwrap(), Region::Occipital);
        assert_eq!(region("Oz").unwrap(), Region::Occipital);
        assert_eq!(region("Pz").unwrap(), Region::Parietal);
    }

    #[test]
    fn mastoid_and_garbage_rejected() {
        assert!(matches!(region("A1"), Err(Error::UnknownLabel(_))));
        assert!(matches!(region("M2"), Err(Error::UnknownLabel(_))));
        assert!(ChannelLabel::new("").is_err());
        assert!(ChannelLabel::new("3C").is_err());
        assert!(ChannelLabel::new("C3-REF").is_err());
    }

    #[test]
    fn one_per_region() {
        let rm = build_region_map(&labels(&["Fz", "Cz", "Pz", "Oz"]).unwrap()).unwrap();
        assert_eq!(
            rm.regions(),
            &[
                (Region::Frontal, vec![0]),
                (Region::Central, vec![1]),
                (Region::Parietal, vec![2]),
                (Region::Occipital, vec![3]),
            ]
        );
    }

    #[test]
    fn single_region_only() {
        let rm = build_region_map(&labels(&["C3", "C4"]).unwrap()).unwrap();
        assert_eq!(rm.regions(), &[(Region::Central, vec![0, 1])]);
    }

    #[test]
    fn standard_19_has_five_regions() {
        let rm = build_region_map(&labels(&STANDARD_19).unwrap()).unwrap();
        assert_eq!(rm.num_regions(), 5);
        assert_eq!(rm.region_sizes().iter().sum::<usize>(), 19);
        let mut sizes = rm.region_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![7, 5, 3, 2, 2]);
    }

    #[test]
    fn standard_64_classifies() {
        let rm = build_region_map(&labels(&STANDARD_64).unwrap()).unwrap();
        assert_eq!(rm.num_regions(), 5);
        assert_eq!(rm.num_channels(), 64);
    }

    #[test]
    fn errors_propagate() {
        assert_eq!(build_region_map(&[]), Err(Error::EmptyChannelList));
        let l = labels(&["Fz", "A1"]).unwrap();
        assert!(matches!(build_region_map(&l), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn from_groups_validates_partition() {
        assert!(RegionMap::from_groups(vec![(Region::Frontal, vec![0, 1])], 2).is_ok());
        assert!(RegionMap::from_groups(vec![(Region::Frontal, vec![0, 0])], 1).is_err());
        assert_eq!(
            RegionMap::from_groups(vec![(Region::Frontal, vec![0])], 2),
            Err(Error::ChannelNotInRegion(1))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_and_determinism(picks in proptest::collection::vec(0usize..64, 1..40)) {
                let names: Vec<&str> = picks.iter().map(|&i| STANDARD_64[i]).collect();
                let l = labels(&names).unwrap();
                let a = build_region_map(&l).unwrap();
                let b = build_region_map(&l).unwrap();
                prop_assert_eq!(&a, &b);
                let mut all: Vec<usize> = a.channel_lists().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..names.len()).collect::<Vec<_>>());
                for list in a.channel_lists() {
                    prop_assert!(!list.is_empty());
                    prop_assert!(list.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }
}
