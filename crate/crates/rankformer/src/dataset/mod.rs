//! Ranking data model: items, lists, splits and padded batches, plus the
//! LETOR interchange format and train-split feature transforms.

mod batch;
mod letor;
mod transform;

pub use batch::{batch_lists, Batch};
pub use letor::{
    attach_implicit_labels, bootstrap_query_id, parse_labels_file, parse_letor,
    serialize_labels_file, serialize_letor, LabelsRecord, ParsedSplit,
};
pub use transform::{fit_transform, inverse_normal_cdf, FeatureTransform, TransformMode};

use crate::{Error, Result, Scalar};

/// One item occurrence inside a ranked list.
#[derive(Debug, Clone, PartialEq)]
pub struct Item<F> {
    pub features: Vec<F>,
    /// Explicit relevance grade in `{0..r_max}`.
    pub explicit_label: u8,
    /// Implicit feedback label in `{0..y_max}`, when simulated or observed.
    pub implicit_label: Option<u8>,
}

/// All item occurrences for one query, with an optional listwide label.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<F> {
    pub query_id: String,
    pub items: Vec<Item<F>>,
    /// Listwide label: the maximum implicit item label.
    pub listwide: Option<u8>,
}

impl<F: Scalar> RankedList<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn explicit_labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.explicit_label).collect()
    }

    pub fn implicit_labels(&self) -> Option<Vec<u8>> {
        self.items.iter().map(|i| i.implicit_label).collect()
    }
}

/// One named partition of a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split<F> {
    pub lists: Vec<RankedList<F>>,
    /// Identity of the feature transform already applied, if any.
    pub transform_marker: Option<u64>,
}

impl<F: Scalar> Split<F> {
    pub fn new(lists: Vec<RankedList<F>>) -> Self {
        Split {
            lists,
            transform_marker: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// A full dataset: train/valid/test splits sharing one feature space.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub train: Split<F>,
    pub valid: Split<F>,
    pub test: Split<F>,
    pub d_x: usize,
    pub r_max: u8,
    pub y_max: u8,
}

impl<F: Scalar> Dataset<F> {
    /// Assembles parsed splits, padding every item to the widest feature
    /// dimensionality seen (absent trailing features are the 0.0 fill).
    pub fn assemble(
        train: ParsedSplit<F>,
        valid: ParsedSplit<F>,
        test: ParsedSplit<F>,
        r_max: u8,
        y_max: u8,
    ) -> Result<Self> {
        let d_x = train.d_x.max(valid.d_x).max(test.d_x);
        let pad = |mut split: Split<F>| -> Result<Split<F>> {
            for list in &mut split.lists {
                for item in &mut list.items {
                    if item.explicit_label > r_max {
                        return Err(Error::LabelDomain {
                            value: item.explicit_label as i64,
                            max: r_max,
                        });
                    }
                    item.features.resize(d_x, F::zero());
                }
            }
            Ok(split)
        };
        Ok(Dataset {
            train: pad(train.split)?,
            valid: pad(valid.split)?,
            test: pad(test.split)?,
            d_x,
            r_max,
            y_max,
        })
    }

    pub fn split(&self, name: SplitName) -> &Split<F> {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Split<F> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Valid => &mut self.valid,
            SplitName::Test => &mut self.test,
        }
    }

    /// Fits a feature transform on the training split only.
    pub fn fit_feature_transform(&self, mode: TransformMode) -> Result<FeatureTransform<F>> {
        fit_transform(&self.train, mode, "train")
    }

    /// Applies a fitted transform to every split, returning a new dataset.
    pub fn apply_feature_transform(&self, t: &FeatureTransform<F>) -> Result<Self> {
        Ok(Dataset {
            train: t.apply(&self.train)?,
            valid: t.apply(&self.valid)?,
            test: t.apply(&self.test)?,
            ..self.clone()
        })
    }
}
