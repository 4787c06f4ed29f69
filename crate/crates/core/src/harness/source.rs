use std::collections::BTreeMap;

use crate::bandforge::{read_engineered_image, BandSelection};
use crate::data::{read_ground_truth, DatasetIndex, Sample};
use crate::error::{Error, Result};

/// Where training and evaluation fetch samples from.
pub trait SampleSource {
    /// Every available id, sorted.
    fn ids(&self) -> Vec<String>;
    fn contains(&self, id: &str) -> bool;
    /// Whether the sample's mask has any landslide pixel.
    fn is_landslide(&self, id: &str) -> bool;
    /// The sample with the band selection the source was built for.
    fn load(&self, id: &str) -> Result<Sample>;
}

/// Samples read lazily from a dataset root and its engineered-band cache.
#[derive(Debug, Clone)]
pub struct DiskSource {
    index: DatasetIndex,
    selection: BandSelection,
}

impl DiskSource {
    pub fn new(index: DatasetIndex, selection: BandSelection) -> Self {
        DiskSource { index, selection }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }
}

impl SampleSource for DiskSource {
    fn ids(&self) -> Vec<String> {
        self.index.sample_ids().to_vec()
    }

    fn contains(&self, id: &str) -> bool {
        self.index.contains(id)
    }

    fn is_landslide(&self, id: &str) -> bool {
        self.index.is_landslide(id)
    }

    fn load(&self, id: &str) -> Result<Sample> {
        let image = read_engineered_image(&self.index, &self.selection, id)?;
        let mask = read_ground_truth(&self.index, id)?;
        Sample::new(image, mask)
    }
}

/// Samples already held in memory, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    samples: BTreeMap<String, Sample>,
}

impl InMemorySource {
    pub fn new(samples: impl IntoIterator<Item = Sample>) -> Self {
        InMemorySource {
            samples: samples.into_iter().map(|s| (s.id().to_string(), s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl SampleSource for InMemorySource {
    fn ids(&self) -> Vec<String> {
        self.samples.keys().cloned().collect()
    }

    fn contains(&self, id: &str) -> bool {
        self.samples.contains_key(id)
    }

    fn is_landslide(&self, id: &str) -> bool {
        self.samples.get(id).is_some_and(|s| s.mask().positive_count() > 0)
    }

    fn load(&self, id: &str) -> Result<Sample> {
        self.samples.get(id).cloned().ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}
