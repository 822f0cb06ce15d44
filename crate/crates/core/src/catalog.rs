//! Item to semantic-ID mapping and the trie of valid prefixes.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type ItemId = u32;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(Vec<u16>);

impl SemanticId {
    pub fn new(digits: Vec<u16>) -> Self {
        SemanticId(digits)
    }

    pub fn digits(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(u16::to_string).collect();
        f.write_str(&s.join(" "))
    }
}

/// One depth of the trie: every valid prefix of that length.
#[derive(Clone, Debug, Default)]
struct Level {
    index: HashMap<u64, usize>,
    /// `(digit, child node)` sorted by digit; empty at the leaf level.
    children: Vec<Vec<(u16, usize)>>,
}

/// Valid prefixes keyed as fixed-radix integers, one map per depth.
///
/// Node ids are dense per depth; depth `L` nodes are leaves and map to the
/// catalog's item index.
#[derive(Clone, Debug)]
pub struct PrefixTrie {
    l: usize,
    c: usize,
    levels: Vec<Level>,
    leaf_item: Vec<usize>,
}

impl PrefixTrie {
    pub fn depth(&self) -> usize {
        self.l
    }

    pub fn codebook(&self) -> usize {
        self.c
    }

    pub fn key(&self, prefix: &[u16]) -> u64 {
        prefix
            .iter()
            .fold(0u64, |k, &d| k * self.c as u64 + d as u64)
    }

    /// Node id of a prefix at depth `prefix.len()`.
    pub fn node(&self, prefix: &[u16]) -> Option<usize> {
        if prefix.len() > self.l || prefix.iter().any(|&d| d as usize >= self.c) {
            return None;
        }
        self.levels[prefix.len()].index.get(&self.key(prefix)).copied()
    }

    pub fn nodes_at(&self, depth: usize) -> usize {
        self.levels[depth].index.len()
    }

    /// Children of node `node` at depth `depth` (`depth < L`).
    pub fn children(&self, depth: usize, node: usize) -> &[(u16, usize)] {
        &self.levels[depth].children[node]
    }

    /// Catalog item index of a leaf node.
    pub fn leaf_item(&self, leaf: usize) -> usize {
        self.leaf_item[leaf]
    }

    pub fn valid_continuations(&self, prefix: &[u16]) -> Result<Vec<u16>> {
        if prefix.len() >= self.l {
            return Err(Error::InvalidPrefix(prefix.to_vec()));
        }
        let node = self
            .node(prefix)
            .ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        Ok(self.children(prefix.len(), node).iter().map(|&(d, _)| d).collect())
    }

    pub fn mask_vector(&self, prefix: &[u16]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.c];
        for d in self.valid_continuations(prefix)? {
            mask[d as usize] = true;
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogStats {
    /// Mean number of valid next digits over valid prefixes, per depth.
    pub branching: Vec<f64>,
    pub item_count: usize,
    /// `digit_histograms[t][c]`: items whose digit `t` equals `c`.
    pub digit_histograms: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    l: usize,
    c: usize,
    ids: Vec<ItemId>,
    sids: Vec<SemanticId>,
    by_id: HashMap<ItemId, usize>,
    /// Per item, node id at each depth `1..=L` (index `t-1`).
    paths: Vec<Vec<usize>>,
    trie: PrefixTrie,
}

impl Catalog {
    /// Builds the catalog and its prefix trie.
    pub fn build(l: usize, c: usize, items: Vec<(ItemId, SemanticId)>) -> Result<Catalog> {
        if items.is_empty() {
            return Err(Error::invalid("catalog must contain at least one item"));
        }
        if l == 0 || c == 0 || c > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("bad catalog shape L={l} C={c}")));
        }
        if (c as f64).powi(l as i32) > u64::MAX as f64 {
            return Err(Error::invalid("prefix keys overflow 64 bits"));
        }
        let mut trie = PrefixTrie {
            l,
            c,
            levels: vec![Level::default(); l + 1],
            leaf_item: Vec::new(),
        };
        trie.levels[0].index.insert(0, 0);
        trie.levels[0].children.push(Vec::new());

        let mut ids = Vec::with_capacity(items.len());
        let mut sids = Vec::with_capacity(items.len());
        let mut by_id = HashMap::with_capacity(items.len());
        let mut paths = Vec::with_capacity(items.len());
        let mut leaf_owner: HashMap<u64, ItemId> = HashMap::new();

        for (idx, (id, sid)) in items.into_iter().enumerate() {
            if sid.len() != l {
                return Err(Error::invalid(format!(
                    "item {id}: semantic id has {} digits, expected {l}",
                    sid.len()
                )));
            }
            if let Some(pos) = sid.digits().iter().position(|&d| d as usize >= c) {
                return Err(Error::DigitOutOfRange {
                    digit: sid.digits()[pos] as usize,
                    position: pos,
                    codebook: c,
                });
            }
            if by_id.insert(id, idx).is_some() {
                return Err(Error::invalid(format!("item id {id} appears twice")));
            }
            let full = trie.key(sid.digits());
            if let Some(&first) = leaf_owner.get(&full) {
                return Err(Error::DuplicateSid {
                    sid: sid.to_string(),
                    first,
                    second: id,
                });
            }
            leaf_owner.insert(full, id);

            let mut path = Vec::with_capacity(l);
            let mut parent = 0usize;
            for t in 1..=l {
                let key = trie.key(&sid.digits()[..t]);
                let next_id = trie.levels[t].index.len();
                let node = *trie.levels[t].index.entry(key).or_insert(next_id);
                if node == next_id {
                    if t < l {
                        trie.levels[t].children.push(Vec::new());
                    } else {
                        trie.leaf_item.push(idx);
                    }
                    let digit = sid.digits()[t - 1];
                    let kids = &mut trie.levels[t - 1].children[parent];
                    let at = kids.partition_point(|&(d, _)| d < digit);
                    kids.insert(at, (digit, node));
                }
                path.push(node);
                parent = node;
            }
            ids.push(id);
            sids.push(sid);
            paths.push(path);
        }
        Ok(Catalog {
            l,
            c,
            ids,
            sids,
            by_id,
            paths,
            trie,
        })
    }

    pub fn depth(&self) -> usize {
        self.l
    }

    pub fn codebook(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    /// Item id at dense index `idx`.
    pub fn id_at(&self, idx: usize) -> ItemId {
        self.ids[idx]
    }

    pub fn sid_at(&self, idx: usize) -> &SemanticId {
        &self.sids[idx]
    }

    pub fn index_of(&self, id: ItemId) -> Result<usize> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("item {id}")))
    }

    /// Trie node at each depth `1..=L` along the item's SID.
    pub fn path_at(&self, idx: usize) -> &[usize] {
        &self.paths[idx]
    }

    pub fn sid_of_item(&self, id: ItemId) -> Result<&SemanticId> {
        Ok(&self.sids[self.index_of(id)?])
    }

    pub fn item_of_sid(&self, digits: &[u16]) -> Result<ItemId> {
        if digits.len() != self.l {
            return Err(Error::NotFound(format!("semantic id {digits:?}")));
        }
        self.trie
            .node(digits)
            .map(|leaf| self.ids[self.trie.leaf_item(leaf)])
            .ok_or_else(|| Error::NotFound(format!("semantic id {digits:?}")))
    }

    pub fn items(&self) -> impl Iterator<Item = (ItemId, &SemanticId)> {
        self.ids.iter().copied().zip(&self.sids)
    }

    /// Branching is averaged uniformly over the valid prefixes of each depth.
    pub fn branching_profile(&self) -> CatalogStats {
        let branching = (0..self.l)
            .map(|t| {
                let lvl = &self.trie.levels[t];
                let total: usize = lvl.children.iter().map(Vec::len).sum();
                total as f64 / lvl.children.len() as f64
            })
            .collect();
        let mut digit_histograms = vec![vec![0u32; self.c]; self.l];
        for sid in &self.sids {
            for (t, &d) in sid.digits().iter().enumerate() {
                digit_histograms[t][d as usize] += 1;
            }
        }
        CatalogStats {
            branching,
            item_count: self.len(),
            digit_histograms,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#sid L={} C={}", self.l, self.c)?;
        for (id, sid) in self.items() {
            writeln!(w, "{id}\t{sid}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Catalog> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })??;
        let (l, c) = parse_sid_header(&header)?;
        let mut items = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: lineno, msg };
            let (id, digits) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected item_id<TAB>digits".into()))?;
            let id: ItemId = id
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad item id {id:?}")))?;
            let digits: Vec<u16> = digits
                .split_whitespace()
                .map(|d| d.parse::<u16>().map_err(|_| bad(format!("bad digit {d:?}"))))
                .collect::<Result<_>>()?;
            if digits.len() != l {
                return Err(bad(format!("expected {l} digits, got {}", digits.len())));
            }
            items.push((id, SemanticId::new(digits)));
        }
        Catalog::build(l, c, items)
    }
}

fn parse_sid_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse {
        line: 1,
        msg: format!("expected '#sid L=<L> C=<C>', got {line:?}"),
    };
    let rest = line.strip_prefix("#sid").ok_or_else(bad)?;
    let mut l = None;
    let mut c = None;
    for part in rest.split_whitespace() {
        match part.split_once('=') {
            Some(("L", v)) => l = v.parse().ok(),
            Some(("C", v)) => c = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    Ok((l.ok_or_else(bad)?, c.ok_or_else(bad)?))
}
