//! Synthetic catalogs with a target branching profile, user histories drawn
//! from the oracle's next-item law, leave-last-out splits and the dataset
//! file format.

use std::io::{BufRead, Write};

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{Catalog, ItemId, SemanticId};
use crate::error::{Error, Result};
use crate::teacher::oracle::OracleTeacher;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorProfile {
    pub l: usize,
    pub c: usize,
    pub items: usize,
    /// Target mean branching per depth.
    pub branching: Vec<f64>,
    pub history_min: usize,
    pub history_max: usize,
    pub users: usize,
    pub gamma: f64,
    /// Oracle temperature; `None` calibrates it to `top1_target`.
    pub kappa: Option<f64>,
    pub top1_target: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        GeneratorProfile {
            l: 4,
            c: 256,
            items: 2000,
            branching: vec![64.0, 12.0, 2.2, 1.2],
            history_min: 4,
            history_max: 20,
            users: 5000,
            gamma: 0.8,
            kappa: None,
            top1_target: 0.45,
            epsilon: 0.05,
            seed: 42,
        }
    }
}

impl GeneratorProfile {
    /// The 512-item catalog used by exhaustive checks.
    pub fn small() -> Self {
        GeneratorProfile {
            items: 512,
            branching: vec![16.0, 8.0, 2.0, 2.0],
            users: 200,
            ..GeneratorProfile::default()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "default" | "desk" => Ok(GeneratorProfile::default()),
            "small" => Ok(GeneratorProfile::small()),
            "tiny" => Ok(GeneratorProfile {
                items: 120,
                branching: vec![8.0, 4.0, 2.0, 2.0],
                users: 60,
                ..GeneratorProfile::default()
            }),
            other => Err(Error::invalid(format!(
                "unknown profile {other:?} (expected default, small or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.len() != self.l {
            return Err(Error::invalid(format!(
                "{} branching targets for L={}",
                self.branching.len(),
                self.l
            )));
        }
        if self.branching[0] > self.c as f64 {
            return Err(Error::invalid(format!(
                "first-digit branching {} exceeds codebook size {}",
                self.branching[0], self.c
            )));
        }
        if self.branching.iter().any(|&b| !(b >= 1.0)) {
            return Err(Error::invalid("branching targets must be at least 1"));
        }
        if self.items < 2 {
            return Err(Error::invalid("a generated catalog needs at least 2 items"));
        }
        if self.history_min < 1 || self.history_max < self.history_min {
            return Err(Error::invalid(format!(
                "bad history range {}..={}",
                self.history_min, self.history_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return Err(Error::invalid(format!("kappa {k} must be positive")));
            }
        }
        Ok(())
    }
}

/// Generates a catalog whose per-depth node counts follow the branching
/// targets. Items get ids `0..M` in SID lexicographic order.
pub fn generate_catalog(profile: &GeneratorProfile) -> Result<Catalog> {
    profile.validate()?;
    let (l, c, m) = (profile.l, profile.c, profile.items);
    let product: f64 = profile.branching.iter().product();
    if product < m as f64 * (1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "branching targets multiply to {product:.2} < {m} items"
        )));
    }
    let mut counts = vec![1usize; l + 1];
    for t in 1..=l {
        let prev = counts[t - 1];
        let want = if t == l {
            m
        } else {
            (prev as f64 * profile.branching[t - 1]).round() as usize
        };
        if want < prev || want > prev * c {
            return Err(Error::invalid(format!(
                "depth {t}: {want} nodes cannot hang off {prev} parents with codebook {c}"
            )));
        }
        counts[t] = want;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    // prefixes[t] lists the depth-t prefixes in lexicographic order.
    let mut prefixes: Vec<Vec<u16>> = vec![Vec::new()];
    for t in 1..=l {
        let parents = prefixes.len();
        let mut fan = vec![1usize; parents];
        let mut extra = counts[t] - parents;
        while extra > 0 {
            let p = rng.gen_range(0..parents);
            if fan[p] < c {
                fan[p] += 1;
                extra -= 1;
            }
        }
        let mut next = Vec::with_capacity(counts[t]);
        for (p, prefix) in prefixes.iter().enumerate() {
            // The last digit only disambiguates siblings, and a lone child
            // has nothing to disambiguate: both use 0, 1, ... in order.
            let mut digits: Vec<usize> = if t == l || fan[p] == 1 {
                (0..fan[p]).collect()
            } else {
                index::sample(&mut rng, c, fan[p]).into_vec()
            };
            digits.sort_unstable();
            for d in digits {
                let mut q = prefix.clone();
                q.push(d as u16);
                next.push(q);
            }
        }
        prefixes = next;
    }
    let items = prefixes
        .into_iter()
        .enumerate()
        .map(|(i, sid)| (i as ItemId, SemanticId::new(sid)))
        .collect();
    Catalog::build(l, c, items)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: u32,
    /// Chronological item ids.
    pub items: Vec<ItemId>,
}

impl UserRecord {
    /// Serialized length `2 + L * |X_u|` (user token, digits, EOS).
    pub fn serialized_len(&self, l: usize) -> usize {
        2 + l * self.items.len()
    }
}

/// Index of the item sampled by inverse CDF from log-probabilities.
pub fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Samples histories: the first item is uniform, every later item is drawn
/// from the oracle's law given the items so far.
pub fn generate_histories(
    catalog: &Catalog,
    oracle: &OracleTeacher,
    profile: &GeneratorProfile,
) -> Result<Vec<UserRecord>> {
    profile.validate()?;
    if oracle.catalog().len() != catalog.len() {
        return Err(Error::invalid("oracle was built over a different catalog"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(profile.users);
    for user in 0..profile.users {
        let n = rng.gen_range(profile.history_min..=profile.history_max);
        let mut items = Vec::with_capacity(n);
        let first = catalog.id_at(rng.gen_range(0..catalog.len()));
        items.push(first);
        let mut u = vec![0.0; oracle.d_h()];
        oracle.extend_user_vector(&mut u, first, 0)?;
        for pos in 1..n {
            let lp = oracle.log_probs_from_user(&u);
            let next = catalog.id_at(sample_index(&lp, &mut rng));
            items.push(next);
            oracle.extend_user_vector(&mut u, next, pos)?;
        }
        out.push(UserRecord {
            user_id: user as u32,
            items,
        });
    }
    Ok(out)
}

/// One prediction case: the first `prefix_len` items of a record predict
/// the item right after them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub record: usize,
    pub prefix_len: usize,
    pub target: ItemId,
}

impl Example {
    pub fn history<'a>(&self, records: &'a [UserRecord]) -> &'a [ItemId] {
        &records[self.record].items[..self.prefix_len]
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Records shorter than three items.
    pub dropped: usize,
}

/// Cap on rolling training targets per user.
pub const TRAIN_TARGETS_PER_USER: usize = 4;

/// Leave-last-out: the last item is the test target, the penultimate the
/// validation target, and the items before those serve as rolling training
/// targets (`x_k` given `x_1..x_{k-1}` for `k >= 2`, latest four kept).
pub fn split_leave_last_out(records: &[UserRecord]) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for (r, rec) in records.iter().enumerate() {
        let n = rec.items.len();
        if n < 3 {
            split.dropped += 1;
            continue;
        }
        split.test.push(Example {
            record: r,
            prefix_len: n - 1,
            target: rec.items[n - 1],
        });
        split.val.push(Example {
            record: r,
            prefix_len: n - 2,
            target: rec.items[n - 2],
        });
        // targets at 0-based positions 1..=n-3
        let lo = 1.max((n - 2).saturating_sub(TRAIN_TARGETS_PER_USER));
        for k in lo..n - 2 {
            split.train.push(Example {
                record: r,
                prefix_len: k,
                target: rec.items[k],
            });
        }
    }
    if split.dropped > 0 {
        warn!("dropped {} histories shorter than 3 items", split.dropped);
    }
    split
}

pub fn write_dataset<W: Write>(mut w: W, l: usize, records: &[UserRecord]) -> Result<()> {
    writeln!(w, "#users L={l}")?;
    for rec in records {
        let items: Vec<String> = rec.items.iter().map(u32::to_string).collect();
        writeln!(w, "{}\t{}", rec.user_id, items.join(" "))?;
    }
    Ok(())
}

/// Returns `(L, records)`.
pub fn read_dataset<R: BufRead>(r: R) -> Result<(usize, Vec<UserRecord>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    let l = header
        .strip_prefix("#users L=")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected '#users L=<L>', got {header:?}"),
        })?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let (id, items) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected user_id<TAB>items".into()))?;
        let user_id = id
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad user id {id:?}")))?;
        let items = items
            .split_whitespace()
            .map(|t| t.parse::<ItemId>().map_err(|_| bad(format!("bad item id {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(UserRecord { user_id, items });
    }
    Ok((l, out))
}

/// Checks that every record only mentions catalog items.
pub fn check_records(catalog: &Catalog, records: &[UserRecord]) -> Result<()> {
    for rec in records {
        for &it in &rec.items {
            catalog.index_of(it).map_err(|_| {
                Error::NotFound(format!("item {it} in history of user {}", rec.user_id))
            })?;
        }
    }
    Ok(())
}
