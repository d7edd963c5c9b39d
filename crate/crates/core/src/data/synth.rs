use rand::seq::index;
use rand::Rng;

use super::{BehaviorLog, Record};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interests: usize,
    /// Interactions per user.
    pub seq_len: usize,
    /// Probability that an interaction ignores the user's clusters.
    pub noise: f64,
    /// Probability of staying in the previous interaction's cluster when it
    /// is one of the user's clusters.
    pub stickiness: f64,
    /// Timestamps are drawn from `[0, time_span)`.
    pub time_span: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            num_interests: 8,
            seq_len: 30,
            noise: 0.1,
            stickiness: 0.5,
            time_span: 1_000_000,
        }
    }
}

/// Planted structure behind a synthetic log, indexed by the raw numeric ids
/// (`u{n}`, `i{n}`, `c{n}`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub user_clusters: Vec<Vec<usize>>,
    pub item_cluster: Vec<usize>,
}

impl GroundTruth {
    pub fn to_text(&self) -> String {
        let mut out = String::from("kind\tid\tclusters\n");
        for (u, cs) in self.user_clusters.iter().enumerate() {
            let list: Vec<String> = cs.iter().map(usize::to_string).collect();
            out.push_str(&format!("user\tu{u}\t{}\n", list.join(" ")));
        }
        for (i, c) in self.item_cluster.iter().enumerate() {
            out.push_str(&format!("item\ti{i}\t{c}\n"));
        }
        out
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let mut problems = Vec::new();
    if cfg.num_interests < 2 {
        problems.push(format!("num_interests must be at least 2, got {}", cfg.num_interests));
    }
    if cfg.num_items < cfg.num_interests {
        problems.push(format!(
            "num_items ({}) is smaller than num_interests ({})",
            cfg.num_items, cfg.num_interests
        ));
    }
    if cfg.num_users == 0 || cfg.seq_len == 0 {
        problems.push("num_users and seq_len must be positive".into());
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        problems.push(format!("noise must lie in [0, 1], got {}", cfg.noise));
    }
    if !(0.0..=1.0).contains(&cfg.stickiness) {
        problems.push(format!("stickiness must lie in [0, 1], got {}", cfg.stickiness));
    }
    if cfg.time_span <= 0 {
        problems.push("time_span must be positive".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Items split into contiguous, evenly sized cluster blocks; each user
/// follows two or three of them. The category of an item is its cluster.
pub fn synth_generate<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<(BehaviorLog, GroundTruth)> {
    validate(cfg)?;
    let k = cfg.num_interests;
    let item_cluster: Vec<usize> = (0..cfg.num_items).map(|i| i * k / cfg.num_items).collect();
    let mut members = vec![Vec::new(); k];
    for (i, &c) in item_cluster.iter().enumerate() {
        members[c].push(i);
    }

    let mut records = Vec::with_capacity(cfg.num_users * cfg.seq_len);
    let mut user_clusters = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let count = rng.random_range(2..=3).min(k);
        let mut clusters = index::sample(rng, k, count).into_vec();
        clusters.sort_unstable();
        let mut times: Vec<i64> = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.time_span)).collect();
        times.sort_unstable();
        let mut previous: Option<usize> = None;
        for t in times {
            let item = if rng.random::<f64>() < cfg.noise {
                rng.random_range(0..cfg.num_items)
            } else {
                let cluster = match previous {
                    Some(p) if clusters.contains(&p) && rng.random::<f64>() < cfg.stickiness => p,
                    _ => clusters[rng.random_range(0..clusters.len())],
                };
                members[cluster][rng.random_range(0..members[cluster].len())]
            };
            previous = Some(item_cluster[item]);
            records.push(Record {
                user: format!("u{u}"),
                item: format!("i{item}"),
                category: format!("c{}", item_cluster[item]),
                timestamp: t,
                event: None,
            });
        }
        user_clusters.push(clusters);
    }
    Ok((
        BehaviorLog { records },
        GroundTruth {
            user_clusters,
            item_cluster,
        },
    ))
}
