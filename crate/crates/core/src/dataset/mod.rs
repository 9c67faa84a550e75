//! Synthetic records, images, splits, augmentation and persistence.

pub mod augment;
pub mod category;
pub mod generate;
pub mod image;
pub mod io;
pub mod split;

pub use augment::{augment, AugmentConfig};
pub use category::{default_categories, CategorySpec};
pub use generate::{generate, render_image, GeneratorConfig, WasteRecord};
pub use image::Image;
pub use io::{load_dataset, load_records, save_dataset};
pub use split::{stratified_split, Split, SplitIndex};

/// Records plus the vocabulary that gives category indices their names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<WasteRecord>,
    pub vocabulary: Vec<String>,
}

impl Dataset {
    pub fn load(dir: &std::path::Path) -> crate::Result<Self> {
        let (records, vocabulary) = load_dataset(dir)?;
        Ok(Self { records, vocabulary })
    }

    pub fn save(&self, dir: &std::path::Path) -> crate::Result<()> {
        save_dataset(dir, &self.records, &self.vocabulary)
    }

    pub fn split(&self, fractions: [f64; 3], seed: u64) -> crate::Result<SplitIndex> {
        let items: Vec<(u64, usize)> = self.records.iter().map(|r| (r.id, r.category)).collect();
        stratified_split(&items, fractions, seed)
    }

    /// Records of one split, in split-index order.
    pub fn subset(&self, index: &SplitIndex, which: Split) -> crate::Result<Vec<&WasteRecord>> {
        let by_id: std::collections::HashMap<u64, &WasteRecord> = self.records.iter().map(|r| (r.id, r)).collect();
        index
            .ids(which)
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| crate::Error::Index(format!("split references unknown id {id}")))
            })
            .collect()
    }
}
