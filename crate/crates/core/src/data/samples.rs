use std::collections::BTreeMap;

use rand::Rng;

use super::{BehaviorLog, Record};
use crate::{Error, Result};

/// Dense index maps for users, items and categories. Index 0 is padding in
/// every table, so real ids start at 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    users: Vec<String>,
    items: Vec<String>,
    categories: Vec<String>,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    category_index: BTreeMap<String, usize>,
    /// Category index of each item index.
    item_category: Vec<usize>,
}

const PAD: &str = "<pad>";

fn index_table(ids: impl Iterator<Item = String>) -> (Vec<String>, BTreeMap<String, usize>) {
    let mut map = BTreeMap::new();
    for id in ids {
        map.entry(id).or_insert(0);
    }
    let mut names = vec![PAD.to_string()];
    for (i, (name, slot)) in map.iter_mut().enumerate() {
        *slot = i + 1;
        names.push(name.clone());
    }
    (names, map)
}

impl Vocab {
    /// Indices follow sorted raw-id order; an item takes the category of its
    /// earliest record.
    pub fn build(log: &BehaviorLog) -> Self {
        let (users, user_index) = index_table(log.records.iter().map(|r| r.user.clone()));
        let (items, item_index) = index_table(log.records.iter().map(|r| r.item.clone()));
        let (categories, category_index) = index_table(log.records.iter().map(|r| r.category.clone()));
        let mut item_category = vec![0; items.len()];
        let mut earliest = vec![i64::MAX; items.len()];
        for r in &log.records {
            let i = item_index[&r.item];
            if r.timestamp < earliest[i] {
                earliest[i] = r.timestamp;
                item_category[i] = category_index[&r.category];
            }
        }
        Self {
            users,
            items,
            categories,
            user_index,
            item_index,
            category_index,
            item_category,
        }
    }

    /// Rebuilds a vocabulary from its decoded tables (index order, padding
    /// included at position 0).
    pub fn from_tables(
        users: Vec<String>,
        items: Vec<String>,
        categories: Vec<String>,
        item_category: Vec<usize>,
    ) -> Result<Self> {
        let index = |names: &[String], kind: &str| -> Result<BTreeMap<String, usize>> {
            let mut map = BTreeMap::new();
            for (i, n) in names.iter().enumerate().skip(1) {
                if map.insert(n.clone(), i).is_some() {
                    return Err(Error::Data(format!("duplicate {kind} id {n:?} in vocabulary")));
                }
            }
            Ok(map)
        };
        if users.is_empty() || items.is_empty() || categories.is_empty() || item_category.len() != items.len() {
            return Err(Error::Data("vocabulary tables are inconsistent".into()));
        }
        if item_category.iter().any(|&c| c >= categories.len()) {
            return Err(Error::Data("item category out of range".into()));
        }
        Ok(Self {
            user_index: index(&users, "user")?,
            item_index: index(&items, "item")?,
            category_index: index(&categories, "category")?,
            users,
            items,
            categories,
            item_category,
        })
    }

    /// Table sizes including the padding row.
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn user(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    pub fn category(&self, raw: &str) -> Option<usize> {
        self.category_index.get(raw).copied()
    }

    pub fn user_name(&self, index: usize) -> Option<&str> {
        self.users.get(index).filter(|_| index > 0).map(String::as_str)
    }

    pub fn item_name(&self, index: usize) -> Option<&str> {
        self.items.get(index).filter(|_| index > 0).map(String::as_str)
    }

    pub fn category_name(&self, index: usize) -> Option<&str> {
        self.categories.get(index).filter(|_| index > 0).map(String::as_str)
    }

    pub fn category_of(&self, item: usize) -> usize {
        self.item_category[item]
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn item_categories(&self) -> &[usize] {
        &self.item_category
    }
}

/// A time-ordered behavior sequence and one candidate item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub items: Vec<usize>,
    pub categories: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub target_item: usize,
    pub target_category: usize,
    pub target_timestamp: i64,
    pub label: u8,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleConfig {
    pub n_max: usize,
    pub min_interactions: usize,
    pub neg_per_pos: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            min_interactions: 5,
            neg_per_pos: 1,
        }
    }
}

/// Splits at `T`, the timestamp at sorted position `floor(fraction · m)`.
/// Records strictly before `T` train; the rest test.
pub fn temporal_split(log: &BehaviorLog, fraction: f64) -> Result<(BehaviorLog, BehaviorLog, i64)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    if log.is_empty() {
        return Err(Error::Data("cannot split an empty log".into()));
    }
    let mut ts: Vec<i64> = log.records.iter().map(|r| r.timestamp).collect();
    ts.sort_unstable();
    if ts[0] == ts[ts.len() - 1] {
        return Err(Error::Data("degenerate split: all timestamps are identical".into()));
    }
    let pos = ((fraction * ts.len() as f64).floor() as usize).min(ts.len() - 1);
    let split = ts[pos];
    let (train, test): (Vec<Record>, Vec<Record>) = log.records.iter().cloned().partition(|r| r.timestamp < split);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "degenerate split at timestamp {split}: {} train and {} test records",
            train.len(),
            test.len()
        )));
    }
    Ok((BehaviorLog { records: train }, BehaviorLog { records: test }, split))
}

#[derive(Clone, Copy, Debug)]
struct Event {
    timestamp: i64,
    item: usize,
    category: usize,
}

/// Per-user events in time order; ties keep log order.
fn user_histories(log: &BehaviorLog, vocab: &Vocab) -> Result<BTreeMap<usize, Vec<Event>>> {
    let mut by_user: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
    for r in &log.records {
        let lookup = |v: Option<usize>, kind: &str, raw: &str| {
            v.ok_or_else(|| Error::Data(format!("{kind} {raw:?} missing from vocabulary")))
        };
        by_user.entry(lookup(vocab.user(&r.user), "user", &r.user)?).or_default().push(Event {
            timestamp: r.timestamp,
            item: lookup(vocab.item(&r.item), "item", &r.item)?,
            category: lookup(vocab.category(&r.category), "category", &r.category)?,
        });
    }
    for events in by_user.values_mut() {
        events.sort_by_key(|e| e.timestamp);
    }
    Ok(by_user)
}

fn check_config(vocab: &Vocab, cfg: &SampleConfig) -> Result<()> {
    let mut problems = Vec::new();
    if vocab.num_items() <= 1 {
        problems.push("empty item vocabulary".to_string());
    }
    if cfg.min_interactions < 2 {
        problems.push(format!("min_interactions must be at least 2, got {}", cfg.min_interactions));
    }
    if cfg.n_max == 0 {
        problems.push("n_max must be positive".to_string());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

struct Emitter<'a, R: Rng> {
    vocab: &'a Vocab,
    cfg: &'a SampleConfig,
    rng: &'a mut R,
}

impl<R: Rng> Emitter<'_, R> {
    /// Positive for `events[r]` with the preceding events as sequence, plus
    /// negatives drawn outside `history` (sorted item indices).
    fn emit(&mut self, user: usize, events: &[Event], r: usize, history: &[usize], out: &mut Vec<Sample>) {
        let start = r.saturating_sub(self.cfg.n_max);
        let prefix = &events[start..r];
        let target = events[r];
        let positive = Sample {
            user,
            items: prefix.iter().map(|e| e.item).collect(),
            categories: prefix.iter().map(|e| e.category).collect(),
            timestamps: prefix.iter().map(|e| e.timestamp).collect(),
            target_item: target.item,
            target_category: target.category,
            target_timestamp: target.timestamp,
            label: 1,
        };
        let candidates = self.vocab.num_items() - 1;
        let mut negatives = Vec::with_capacity(self.cfg.neg_per_pos);
        if history.len() < candidates {
            for _ in 0..self.cfg.neg_per_pos {
                let item = loop {
                    let i = self.rng.random_range(1..=candidates);
                    if history.binary_search(&i).is_err() {
                        break i;
                    }
                };
                negatives.push(Sample {
                    target_item: item,
                    target_category: self.vocab.category_of(item),
                    label: 0,
                    ..positive.clone()
                });
            }
        }
        out.push(positive);
        out.extend(negatives);
    }
}

fn sorted_items(events: &[Event]) -> Vec<usize> {
    let mut items: Vec<usize> = events.iter().map(|e| e.item).collect();
    items.sort_unstable();
    items.dedup();
    items
}

/// Next-item samples from every position `r ≥ 1` of every user with at least
/// `min_interactions` records in `log`.
pub fn build_samples<R: Rng>(log: &BehaviorLog, vocab: &Vocab, cfg: &SampleConfig, rng: &mut R) -> Result<Vec<Sample>> {
    check_config(vocab, cfg)?;
    let mut emitter = Emitter { vocab, cfg, rng };
    let mut out = Vec::new();
    for (user, events) in user_histories(log, vocab)? {
        if events.len() < cfg.min_interactions {
            continue;
        }
        let history = sorted_items(&events);
        for r in 1..events.len() {
            emitter.emit(user, &events, r, &history, &mut out);
        }
    }
    Ok(out)
}

/// Train and test samples around the split timestamp.
///
/// Users are filtered on their full history. Train samples use only
/// interactions before `split`; test samples target interactions at or after
/// it, with everything earlier as sequence, for users with at least one
/// train interaction. Negatives avoid the user's full history.
pub fn split_samples<R: Rng>(
    log: &BehaviorLog,
    split: i64,
    vocab: &Vocab,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    check_config(vocab, cfg)?;
    let mut emitter = Emitter { vocab, cfg, rng };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (user, events) in user_histories(log, vocab)? {
        if events.len() < cfg.min_interactions {
            continue;
        }
        let history = sorted_items(&events);
        let boundary = events.partition_point(|e| e.timestamp < split);
        for r in 1..boundary {
            emitter.emit(user, &events, r, &history, &mut train);
        }
        if boundary >= 1 {
            for r in boundary..events.len() {
                emitter.emit(user, &events, r, &history, &mut test);
            }
        }
    }
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub split_timestamp: i64,
}

/// Vocabulary, split point, and train/test samples for a full log.
pub fn prepare_dataset<R: Rng>(log: &BehaviorLog, fraction: f64, cfg: &SampleConfig, rng: &mut R) -> Result<Dataset> {
    let (_, _, split) = temporal_split(log, fraction)?;
    let vocab = Vocab::build(log);
    let (train, test) = split_samples(log, split, &vocab, cfg, rng)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "split produced {} train and {} test samples",
            train.len(),
            test.len()
        )));
    }
    Ok(Dataset {
        vocab,
        train,
        test,
        split_timestamp: split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(user: &str, item: &str, cat: &str, ts: i64) -> Record {
        Record {
            user: user.into(),
            item: item.into(),
            category: cat.into(),
            timestamp: ts,
            event: None,
        }
    }

    fn user_log(user: &str, n: usize, offset: i64) -> Vec<Record> {
        (0..n)
            .map(|i| rec(user, &format!("i{}", i + offset as usize), "c", offset + i as i64))
            .collect()
    }

    #[test]
    fn split_of_ten_records() {
        let log = BehaviorLog {
            records: (1..=10).rev().map(|t| rec("u", "i", "c", t)).collect(),
        };
        let (train, test, split) = temporal_split(&log, 0.8).unwrap();
        assert_eq!(split, 9);
        let mut tr: Vec<i64> = train.records.iter().map(|r| r.timestamp).collect();
        tr.sort();
        assert_eq!(tr, (1..=8).collect::<Vec<_>>());
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn split_of_two_records() {
        let log = BehaviorLog {
            records: vec![rec("u", "a", "c", 5), rec("u", "b", "c", 3)],
        };
        let (train, test, _) = temporal_split(&log, 0.5).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        assert_eq!(train.records[0].timestamp, 3);
    }

    #[test]
    fn identical_timestamps_cannot_be_split() {
        let log = BehaviorLog {
            records: vec![rec("u", "a", "c", 5); 4],
        };
        assert_eq!(temporal_split(&log, 0.8).unwrap_err().exit_code(), 3);
        assert_eq!(temporal_split(&log, 1.0).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn short_histories_are_filtered_and_counted() {
        let mut records = user_log("short", 4, 0);
        records.extend(user_log("five", 5, 100));
        let log = BehaviorLog { records };
        let vocab = Vocab::build(&log);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = build_samples(&log, &vocab, &SampleConfig::default(), &mut rng).unwrap();
        assert!(samples.iter().all(|s| s.user == vocab.user("five").unwrap()));
        assert_eq!(samples.iter().filter(|s| s.label == 1).count(), 4);
        assert_eq!(samples.iter().filter(|s| s.label == 0).count(), 4);
    }

    #[test]
    fn sample_config_is_validated() {
        let log = BehaviorLog {
            records: user_log("u", 5, 0),
        };
        let vocab = Vocab::build(&log);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SampleConfig {
            min_interactions: 1,
            ..SampleConfig::default()
        };
        assert_eq!(build_samples(&log, &vocab, &cfg, &mut rng).unwrap_err().exit_code(), 2);
        let empty = Vocab::build(&BehaviorLog::default());
        let err = build_samples(&log, &empty, &SampleConfig::default(), &mut rng).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn negatives_avoid_each_users_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut records = Vec::new();
        for u in 0..1000 {
            let n = rng.random_range(5..12);
            for i in 0..n {
                let item = rng.random_range(0..60);
                records.push(rec(&format!("u{u}"), &format!("i{item}"), &format!("c{}", item % 5), i));
            }
        }
        let log = BehaviorLog { records };
        let vocab = Vocab::build(&log);
        let samples = build_samples(&log, &vocab, &SampleConfig::default(), &mut rng).unwrap();
        let mut history: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for r in &log.records {
            history.entry(vocab.user(&r.user).unwrap()).or_default().push(vocab.item(&r.item).unwrap());
        }
        let negatives: Vec<&Sample> = samples.iter().filter(|s| s.label == 0).collect();
        assert!(negatives.len() > 5000);
        for s in negatives {
            assert!(!history[&s.user].contains(&s.target_item));
            assert_eq!(s.target_category, vocab.category_of(s.target_item));
            assert_ne!(s.target_item, 0);
        }
    }

    #[test]
    fn item_category_comes_from_the_earliest_record() {
        let log = BehaviorLog {
            records: vec![rec("u", "x", "late", 9), rec("u", "x", "early", 2)],
        };
        let v = Vocab::build(&log);
        let x = v.item("x").unwrap();
        assert_eq!(v.category_name(v.category_of(x)), Some("early"));
    }

    #[test]
    fn vocab_rebuilds_from_tables() {
        let log = BehaviorLog {
            records: user_log("u", 6, 3),
        };
        let v = Vocab::build(&log);
        let again = Vocab::from_tables(
            v.users().to_vec(),
            v.items().to_vec(),
            v.categories().to_vec(),
            v.item_categories().to_vec(),
        )
        .unwrap();
        assert_eq!(v, again);
    }

    fn random_log() -> impl Strategy<Value = BehaviorLog> {
        prop::collection::vec((0u8..12, 0u16..40, 0u8..6, 0i64..500), 1..300).prop_map(|rows| BehaviorLog {
            records: rows
                .into_iter()
                .map(|(u, i, c, t)| rec(&format!("u{u}"), &format!("i{i}"), &format!("c{c}"), t))
                .collect(),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vocabulary_round_trips(log in random_log()) {
            let v = Vocab::build(&log);
            for r in &log.records {
                prop_assert_eq!(v.user_name(v.user(&r.user).unwrap()), Some(r.user.as_str()));
                prop_assert_eq!(v.item_name(v.item(&r.item).unwrap()), Some(r.item.as_str()));
                prop_assert_eq!(v.category_name(v.category(&r.category).unwrap()), Some(r.category.as_str()));
            }
            prop_assert_eq!(v.user_name(0), None);
        }

        #[test]
        fn split_partitions_the_log(log in random_log(), fraction in 0.05f64..0.95) {
            match temporal_split(&log, fraction) {
                Ok((train, test, split)) => {
                    prop_assert_eq!(train.len() + test.len(), log.len());
                    prop_assert!(train.records.iter().all(|r| r.timestamp < split));
                    prop_assert!(test.records.iter().all(|r| r.timestamp >= split));
                    let mut all: Vec<_> = train.records.iter().chain(&test.records).map(|r| (r.timestamp, r.user.clone(), r.item.clone())).collect();
                    let mut orig: Vec<_> = log.records.iter().map(|r| (r.timestamp, r.user.clone(), r.item.clone())).collect();
                    all.sort();
                    orig.sort();
                    prop_assert_eq!(all, orig);
                }
                Err(e) => prop_assert_eq!(e.exit_code(), 3),
            }
        }

        #[test]
        fn train_samples_never_see_the_test_period(log in random_log(), seed in 0u64..100, n_max in 1usize..8) {
            let Ok((_, _, split)) = temporal_split(&log, 0.8) else { return Ok(()) };
            let vocab = Vocab::build(&log);
            let cfg = SampleConfig { n_max, min_interactions: 2, neg_per_pos: 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (train, test) = split_samples(&log, split, &vocab, &cfg, &mut rng).unwrap();
            for s in &train {
                prop_assert!(s.target_timestamp < split);
                prop_assert!(s.timestamps.iter().all(|&t| t < split));
            }
            for s in &test {
                prop_assert!(s.target_timestamp >= split);
                prop_assert!(!s.is_empty());
            }
        }

        #[test]
        fn sequences_keep_the_most_recent_interactions(log in random_log(), n_max in 1usize..6) {
            let vocab = Vocab::build(&log);
            let cfg = SampleConfig { n_max, min_interactions: 2, neg_per_pos: 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let samples = build_samples(&log, &vocab, &cfg, &mut rng).unwrap();
            let histories = user_histories(&log, &vocab).unwrap();
            for s in samples.iter().filter(|s| s.label == 1) {
                let events = &histories[&s.user];
                prop_assert!(!s.is_empty() && s.len() <= n_max);
                // the sequence is the suffix immediately before the target
                let r = (0..events.len())
                    .find(|&r| {
                        r >= s.len()
                            && events[r].item == s.target_item
                            && events[r].timestamp == s.target_timestamp
                            && events[r - s.len()..r].iter().map(|e| e.item).eq(s.items.iter().copied())
                    });
                prop_assert!(r.is_some());
                let r = r.unwrap();
                prop_assert_eq!(s.len(), r.min(n_max));
                prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
