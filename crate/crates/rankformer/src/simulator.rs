//! Implicit-feedback simulation in three stages: selection of a bootstrap
//! sub-list, a listwide user intent drawn from the best explicit grade, and
//! per-item interactions cascaded from conversions down to clicks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, LabelsRecord, RankedList, Split, SplitName};
use crate::losses::listwide_label;
use crate::rng::{fnv1a, stream_rng, Stream};
use crate::{Error, Result, Scalar};

/// All simulation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Maximum sampled list length.
    pub n_s: usize,
    /// Bootstrap count per original list.
    pub n_b: u32,
    /// Fraction of positive intents that are conversion intents.
    pub kappa: f64,
    /// Click noise floor.
    pub epsilon: f64,
    pub r_max: u8,
    pub y_max: u8,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_s: 16,
            n_b: 10,
            kappa: 0.1,
            epsilon: 0.1,
            r_max: 4,
            y_max: 2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 1 {
            return Err(Error::Config("n_s must be >= 1".into()));
        }
        if self.n_b < 1 {
            return Err(Error::Config("n_b must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config("kappa must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The user's maximal intended action for a list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntentOutcome(pub u8);

/// Maps an explicit relevance grade to a probability of relevance:
/// `(2^r - 1) / (2^r_max - 1)`.
pub fn relevance_prob(r: u8, r_max: u8) -> Result<f64> {
    if r_max < 1 {
        return Err(Error::Config("r_max must be >= 1".into()));
    }
    if r > r_max {
        return Err(Error::LabelDomain {
            value: r as i64,
            max: r_max,
        });
    }
    let num = (1u64 << r) - 1;
    let den = (1u64 << r_max) - 1;
    Ok(num as f64 / den as f64)
}

/// Draws one bootstrap selection: `min(|J|, N_s)` distinct item indices.
/// Lists no longer than `N_s` are taken whole, in their original order.
fn select_one<R: Rng>(list_len: usize, n_s: usize, rng: &mut R) -> Vec<usize> {
    if list_len <= n_s {
        return (0..list_len).collect();
    }
    // Partial Fisher-Yates; equivalent in distribution to resampling
    // uniformly without replacement until N_s items are gathered.
    let mut indices: Vec<usize> = (0..list_len).collect();
    for i in 0..n_s {
        let j = rng.gen_range(i..list_len);
        indices.swap(i, j);
    }
    indices.truncate(n_s);
    indices
}

/// Draws the `N_b` bootstrap selections for one original list.
pub fn select_sublists<F: Scalar, R: Rng>(
    list: &RankedList<F>,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if list.is_empty() {
        return Err(Error::EmptyInput(format!("list `{}` has no items", list.query_id)));
    }
    Ok((0..config.n_b)
        .map(|_| select_one(list.len(), config.n_s, rng))
        .collect())
}

/// Samples the user intent for a list of explicit labels:
/// `P(T=0) = 1 - rho(max r)`, `P(T=1) = (1-kappa) rho(max r)`,
/// `P(T=2) = kappa rho(max r)`.
pub fn sample_intent<R: Rng>(
    explicit_labels: &[u8],
    config: &SimConfig,
    rng: &mut R,
) -> Result<IntentOutcome> {
    let max_r = *explicit_labels
        .iter()
        .max()
        .ok_or_else(|| Error::EmptyInput("sample_intent on empty label vector".into()))?;
    let rho = relevance_prob(max_r, config.r_max)?;
    let u: f64 = rng.gen();
    let t0 = 1.0 - rho;
    let t1 = t0 + (1.0 - config.kappa) * rho;
    let t = if u < t0 {
        0
    } else if u < t1 {
        1
    } else {
        2
    };
    Ok(IntentOutcome(t))
}

/// Samples per-item implicit labels given the list intent. Conversions are
/// decided first, then clicks for items without a conversion; no label can
/// exceed the intent.
pub fn sample_interactions<R: Rng>(
    explicit_labels: &[u8],
    intent: IntentOutcome,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let t = intent.0;
    explicit_labels
        .iter()
        .map(|&r| {
            let rho = relevance_prob(r, config.r_max)?;
            if t == 2 && rng.gen::<f64>() < rho {
                return Ok(2);
            }
            if t >= 1 && rng.gen::<f64>() < config.epsilon + (1.0 - config.epsilon) * rho {
                return Ok(1);
            }
            Ok(0)
        })
        .collect()
}

fn bootstrap_rng(config: &SimConfig, split: SplitName, query_id: &str, b: u32) -> ChaCha8Rng {
    let split_tag = match split {
        SplitName::Train => 0u64,
        SplitName::Valid => 1,
        SplitName::Test => 2,
    };
    stream_rng(
        config.seed,
        Stream::Simulation,
        &[split_tag, fnv1a(query_id.as_bytes()), b as u64],
    )
}

/// One simulated split: the sampled lists (with implicit labels attached)
/// plus the auxiliary label records keyed by (query id, bootstrap index).
#[derive(Debug, Clone)]
pub struct SimulatedSplit<F> {
    pub split: Split<F>,
    pub records: Vec<LabelsRecord>,
}

fn simulate_split<F: Scalar>(
    split: &Split<F>,
    name: SplitName,
    config: &SimConfig,
) -> Result<SimulatedSplit<F>> {
    let mut lists = Vec::with_capacity(split.lists.len() * config.n_b as usize);
    let mut records = Vec::with_capacity(lists.capacity());
    for original in &split.lists {
        if original.is_empty() {
            return Err(Error::EmptyInput(format!(
                "list `{}` has no items",
                original.query_id
            )));
        }
        for b in 0..config.n_b {
            let mut rng = bootstrap_rng(config, name, &original.query_id, b);
            let selection = select_one(original.len(), config.n_s, &mut rng);
            let explicit: Vec<u8> = selection
                .iter()
                .map(|&i| original.items[i].explicit_label)
                .collect();
            let intent = sample_intent(&explicit, config, &mut rng)?;
            let labels = sample_interactions(&explicit, intent, config, &mut rng)?;
            debug_assert!(labels.iter().all(|&y| y <= intent.0));

            let items = selection
                .iter()
                .zip(&labels)
                .map(|(&i, &y)| {
                    let mut item = original.items[i].clone();
                    item.implicit_label = Some(y);
                    item
                })
                .collect();
            lists.push(RankedList {
                query_id: crate::dataset::bootstrap_query_id(&original.query_id, b),
                items,
                listwide: Some(listwide_label(&labels)?),
            });
            records.push(LabelsRecord {
                query_id: original.query_id.clone(),
                bootstrap_idx: b,
                labels,
            });
        }
    }
    Ok(SimulatedSplit {
        split: Split::new(lists),
        records,
    })
}

/// Full simulation over a dataset; deterministic given (dataset, config).
pub fn simulate<F: Scalar>(dataset: &Dataset<F>, config: &SimConfig) -> Result<SimulatedDataset<F>> {
    config.validate()?;
    let train = simulate_split(&dataset.train, SplitName::Train, config)?;
    let valid = simulate_split(&dataset.valid, SplitName::Valid, config)?;
    let test = simulate_split(&dataset.test, SplitName::Test, config)?;
    Ok(SimulatedDataset {
        dataset: Dataset {
            train: train.split,
            valid: valid.split,
            test: test.split,
            d_x: dataset.d_x,
            r_max: dataset.r_max,
            y_max: dataset.y_max,
        },
        train_records: train.records,
        valid_records: valid.records,
        test_records: test.records,
    })
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset<F> {
    /// Sampled lists with implicit labels and listwide labels attached.
    pub dataset: Dataset<F>,
    pub train_records: Vec<LabelsRecord>,
    pub valid_records: Vec<LabelsRecord>,
    pub test_records: Vec<LabelsRecord>,
}

/// Distribution summary of a simulated split: listwide-label counts and,
/// per implicit label, the histogram of explicit grades.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SimSummary {
    pub lists: usize,
    pub items: usize,
    /// counts[t] over lists.
    pub listwide_counts: Vec<usize>,
    /// explicit_by_implicit[y][r] over items.
    pub explicit_by_implicit: Vec<Vec<usize>>,
}

pub fn summarize<F: Scalar>(split: &Split<F>, r_max: u8, y_max: u8) -> SimSummary {
    let mut listwide_counts = vec![0usize; y_max as usize + 1];
    let mut explicit_by_implicit = vec![vec![0usize; r_max as usize + 1]; y_max as usize + 1];
    let mut items = 0usize;
    for list in &split.lists {
        if let Some(t) = list.listwide {
            listwide_counts[t as usize] += 1;
        }
        for item in &list.items {
            if let Some(y) = item.implicit_label {
                explicit_by_implicit[y as usize][item.explicit_label as usize] += 1;
                items += 1;
            }
        }
    }
    SimSummary {
        lists: split.lists.len(),
        items,
        listwide_counts,
        explicit_by_implicit,
    }
}
