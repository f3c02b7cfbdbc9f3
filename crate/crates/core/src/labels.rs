//! Class-index ↔ FreeSurfer segmentation ID table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::Grid;

/// Number of output classes, background included.
pub const NUM_CLASSES: usize = 32;

const DEFAULT_TABLE: &str = include_str!("../data/subcortical_labels.tsv");

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label table must have {expected} entries, found {found}")]
    WrongSize { expected: usize, found: usize },
    #[error("label table invalid: {0}")]
    Invalid(String),
    #[error("class index {0} is not in the label table")]
    UnknownClassIndex(u16),
    #[error("FreeSurfer id {0} is not in the label table")]
    UnknownFreeSurferId(u16),
    #[error("reading label table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub class_index: u8,
    pub freesurfer_id: u16,
    pub name: String,
}

/// Bijection between contiguous class indices `0..32` and FreeSurfer IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTable {
    entries: Vec<LabelEntry>,
    by_id: HashMap<u16, u8>,
}

impl Default for LabelTable {
    fn default() -> Self {
        Self::from_tsv(DEFAULT_TABLE).expect("bundled label table is valid")
    }
}

impl LabelTable {
    pub fn subcortical() -> Self {
        Self::default()
    }

    pub fn from_entries(mut entries: Vec<LabelEntry>) -> Result<Self, LabelError> {
        if entries.len() != NUM_CLASSES {
            return Err(LabelError::WrongSize { expected: NUM_CLASSES, found: entries.len() });
        }
        entries.sort_by_key(|e| e.class_index);
        for (i, e) in entries.iter().enumerate() {
            if e.class_index as usize != i {
                return Err(LabelError::Invalid(format!("class indices must be 0..{NUM_CLASSES}, missing {i}")));
            }
        }
        if entries[0].freesurfer_id != 0 {
            return Err(LabelError::Invalid("class 0 must map to FreeSurfer id 0".into()));
        }
        let mut by_id = HashMap::with_capacity(entries.len());
        for e in &entries {
            if by_id.insert(e.freesurfer_id, e.class_index).is_some() {
                return Err(LabelError::Invalid(format!("duplicate FreeSurfer id {}", e.freesurfer_id)));
            }
        }
        Ok(Self { entries, by_id })
    }

    /// Parses `class_index<TAB>freesurfer_id<TAB>region_name` rows. A header row and
    /// `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, LabelError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with("class_index") {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(LabelError::Parse { line: n + 1, msg: format!("expected 3 fields, got {}", fields.len()) });
            }
            let parse_err = |what: &str| LabelError::Parse { line: n + 1, msg: format!("bad {what}") };
            entries.push(LabelEntry {
                class_index: fields[0].trim().parse().map_err(|_| parse_err("class_index"))?,
                freesurfer_id: fields[1].trim().parse().map_err(|_| parse_err("freesurfer_id"))?,
                name: fields[2].trim().to_string(),
            });
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class_index\tfreesurfer_id\tregion_name\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.class_index, e.freesurfer_id, e.name);
        }
        s
    }

    /// SHA-256 of the canonical TSV form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-background entries.
    pub fn regions(&self) -> impl Iterator<Item = &LabelEntry> {
        self.entries.iter().skip(1)
    }

    pub fn freesurfer_id(&self, class_index: u16) -> Result<u16, LabelError> {
        self.entries
            .get(class_index as usize)
            .map(|e| e.freesurfer_id)
            .ok_or(LabelError::UnknownClassIndex(class_index))
    }

    pub fn class_index(&self, freesurfer_id: u16) -> Result<u8, LabelError> {
        self.by_id.get(&freesurfer_id).copied().ok_or(LabelError::UnknownFreeSurferId(freesurfer_id))
    }

    pub fn by_name(&self, name: &str) -> Option<&LabelEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains_id(&self, freesurfer_id: u16) -> bool {
        self.by_id.contains_key(&freesurfer_id)
    }

    /// Maps a class-index grid to FreeSurfer IDs.
    pub fn map_to_freesurfer(&self, labels: &Grid<u8>) -> Result<Grid<u16>, LabelError> {
        let lut: Vec<u16> = self.entries.iter().map(|e| e.freesurfer_id).collect();
        let mut out = Vec::with_capacity(labels.len());
        for &c in labels.as_slice() {
            out.push(*lut.get(c as usize).ok_or(LabelError::UnknownClassIndex(c as u16))?);
        }
        Ok(Grid::from_vec(labels.dims(), out).expect("same length"))
    }

    /// Maps a FreeSurfer-ID grid to class indices.
    pub fn map_to_class_indices(&self, ids: &Grid<u16>) -> Result<Grid<u8>, LabelError> {
        let max_id = self.entries.iter().map(|e| e.freesurfer_id).max().unwrap_or(0) as usize;
        let mut lut = vec![u8::MAX; max_id + 1];
        for e in &self.entries {
            lut[e.freesurfer_id as usize] = e.class_index;
        }
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids.as_slice() {
            match lut.get(id as usize) {
                Some(&c) if c != u8::MAX => out.push(c),
                _ => return Err(LabelError::UnknownFreeSurferId(id)),
            }
        }
        Ok(Grid::from_vec(ids.dims(), out).expect("same length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_table_shape() {
        let t = LabelTable::default();
        assert_eq!(t.len(), NUM_CLASSES);
        assert_eq!(t.freesurfer_id(0).unwrap(), 0);
        let ids: Vec<u16> = t.regions().map(|e| e.freesurfer_id).collect();
        assert_eq!(
            ids,
            vec![4, 5, 7, 8, 10, 11, 12, 13, 14, 15, 16, 17, 18, 24, 26, 28, 31, 43, 44, 46, 47, 49, 50, 51, 52, 53, 54, 58, 60, 63, 77]
        );
        // cerebral white matter is excluded
        assert!(!t.contains_id(2) && !t.contains_id(41));
    }

    #[test]
    fn names_match_freesurfer_lut() {
        // (id, name) pairs from FreeSurferColorLUT.txt
        let lut = [
            (17, "Left-Hippocampus"),
            (53, "Right-Hippocampus"),
            (10, "Left-Thalamus"),
            (16, "Brain-Stem"),
            (24, "CSF"),
            (77, "WM-hypointensities"),
            (31, "Left-choroid-plexus"),
        ];
        let t = LabelTable::default();
        for (id, name) in lut {
            let e = t.by_name(name).unwrap();
            assert_eq!(t.freesurfer_id(e.class_index as u16).unwrap(), id);
        }
    }

    #[test]
    fn mapping_is_bijective() {
        let t = LabelTable::default();
        let classes = Grid::from_fn([4, 4, 2], |[i, j, k]| ((i * 8 + j * 2 + k) % NUM_CLASSES) as u8);
        let ids = t.map_to_freesurfer(&classes).unwrap();
        assert_eq!(t.map_to_class_indices(&ids).unwrap(), classes);
        assert_eq!(*ids.get([0, 0, 0]), 0);
    }

    #[test]
    fn out_of_range_values_fail() {
        let t = LabelTable::default();
        let g = Grid::from_vec([1, 1, 2], vec![1u8, 32]).unwrap();
        assert!(matches!(t.map_to_freesurfer(&g), Err(LabelError::UnknownClassIndex(32))));
        let ids = Grid::from_vec([1, 1, 1], vec![2u16]).unwrap();
        assert!(matches!(t.map_to_class_indices(&ids), Err(LabelError::UnknownFreeSurferId(2))));
    }

    #[test]
    fn tsv_round_trip_and_validation() {
        let t = LabelTable::default();
        assert_eq!(LabelTable::from_tsv(&t.to_tsv()).unwrap(), t);
        let dup = t.to_tsv().replace("\t77\t", "\t4\t");
        assert!(matches!(LabelTable::from_tsv(&dup), Err(LabelError::Invalid(_))));
        let short: String = t.to_tsv().lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(LabelTable::from_tsv(&short), Err(LabelError::WrongSize { .. })));
        assert!(matches!(LabelTable::from_tsv("0\t0\n"), Err(LabelError::Parse { .. })));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let t = LabelTable::default();
        assert_eq!(t.fingerprint(), LabelTable::default().fingerprint());
        let renamed = LabelTable::from_tsv(&t.to_tsv().replace("CSF", "Csf")).unwrap();
        assert_ne!(renamed.fingerprint(), t.fingerprint());
    }
}
