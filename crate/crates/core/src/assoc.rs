//! Multi-scan association variables.
//!
//! An association assigns every measurement of every scan either to a track
//! started by an earlier measurement or to the track started by the measurement
//! itself. It is stored row by row: `rows[k]` holds one entry per track that
//! exists when scan `k` is processed (one per measurement of scans before `k`,
//! in batch order) followed by one entry per measurement of scan `k`. Entry
//! values are 0 for a misdetection and `j + 1` when measurement `j` of scan `k`
//! is assigned to that row. The trailing rows are determined by the leading
//! ones: measurement `j` starts its own track exactly when no earlier track
//! takes it.
//!
//! The struct keeps redundant views in sync under edits: per-slot measurement
//! histories, a per-measurement owner table, membership sets for slots with at
//! least one and at least two detections, and a fold digest identifying the
//! association.

use crate::error::{Error, Result};
use crate::recursion::{final_info, Batch, Problem, WeightCache};
use crate::types::{History, MeasKey};

/// Order-insensitive 64-bit digest term for one nonzero row entry.
fn entry_hash(k: usize, i: usize, v: u16) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in (k as u64)
        .to_le_bytes()
        .into_iter()
        .chain((i as u64).to_le_bytes())
        .chain((v as u64).to_le_bytes())
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Index set with O(1) insert, remove and membership, stable under undo.
#[derive(Debug, Clone, Default)]
struct IdSet {
    items: Vec<u32>,
    /// Position in `items` plus one; zero means absent.
    pos: Vec<u32>,
}

impl IdSet {
    fn with_universe(n: usize) -> Self {
        IdSet {
            items: Vec::new(),
            pos: vec![0; n],
        }
    }

    fn insert(&mut self, id: u32) {
        if self.pos[id as usize] == 0 {
            self.items.push(id);
            self.pos[id as usize] = self.items.len() as u32;
        }
    }

    fn remove(&mut self, id: u32) {
        let p = self.pos[id as usize];
        if p == 0 {
            return;
        }
        let last = *self.items.last().unwrap();
        self.items[(p - 1) as usize] = last;
        self.pos[last as usize] = p;
        self.items.pop();
        self.pos[id as usize] = 0;
    }

    fn contains(&self, id: u32) -> bool {
        self.pos[id as usize] != 0
    }

    fn as_slice(&self) -> &[u32] {
        &self.items
    }
}

/// One association of a full measurement batch.
#[derive(Debug, Clone)]
pub struct Theta {
    rows: Vec<Vec<u16>>,
    /// Cumulative measurement counts; `cum[k]` tracks existing before scan `k`.
    cum: Vec<u32>,
    /// owner[k][j] = slot owning measurement (k, j).
    owner: Vec<Vec<u32>>,
    /// Per-slot detection history, sorted by scan. Empty = null slot.
    histories: Vec<History>,
    digest: u64,
    /// Slots with at least one detection.
    detected: IdSet,
    /// Slots with at least two detections (existence pinned to one).
    confirmed: IdSet,
}

impl Theta {
    /// The all-singleton association: every measurement starts its own track.
    pub fn all_singletons(batch: &Batch) -> Self {
        let k = batch.num_scans();
        let total = batch.total();
        let mut rows = Vec::with_capacity(k);
        let mut owner = Vec::with_capacity(k);
        let mut cum = Vec::with_capacity(k + 1);
        cum.push(0u32);
        let mut histories = Vec::with_capacity(total);
        let mut digest = 0u64;
        let mut detected = IdSet::with_universe(total);
        let confirmed = IdSet::with_universe(total);
        for t in 0..k {
            let n = batch.n_before(t);
            let m = batch.m(t);
            let mut row = vec![0u16; n + m];
            let mut own = Vec::with_capacity(m);
            for j in 0..m {
                row[n + j] = j as u16 + 1;
                digest ^= entry_hash(t, n + j, j as u16 + 1);
                let slot = histories.len() as u32;
                own.push(slot);
                histories.push(vec![(t as u16, j as u16)]);
                detected.insert(slot);
            }
            rows.push(row);
            owner.push(own);
            cum.push(cum[t] + m as u32);
        }
        Theta {
            rows,
            cum,
            owner,
            histories,
            digest,
            detected,
            confirmed,
        }
    }

    /// Builds an association from raw rows, checking every structural rule:
    /// row lengths and value ranges, one owner per measurement, no duplicate
    /// assignments within a scan, trailing rows consistent with the leading
    /// ones, and no assignment to a slot that was never started.
    pub fn from_rows(batch: &Batch, rows: Vec<Vec<u16>>) -> Result<Self> {
        let k = batch.num_scans();
        if rows.len() != k {
            return Err(Error::InvalidAssociation(format!(
                "expected {} scan rows, got {}",
                k,
                rows.len()
            )));
        }
        let total = batch.total();
        let mut cum = Vec::with_capacity(k + 1);
        cum.push(0u32);
        for t in 0..k {
            cum.push(cum[t] + batch.m(t) as u32);
        }
        let mut theta = Theta {
            rows: Vec::new(),
            cum,
            owner: (0..k).map(|t| vec![u32::MAX; batch.m(t)]).collect(),
            histories: vec![Vec::new(); total],
            digest: 0,
            detected: IdSet::with_universe(total),
            confirmed: IdSet::with_universe(total),
        };
        for (t, row) in rows.iter().enumerate() {
            let n = batch.n_before(t);
            let m = batch.m(t);
            if row.len() != n + m {
                return Err(Error::InvalidAssociation(format!(
                    "scan {}: expected {} entries, got {}",
                    t,
                    n + m,
                    row.len()
                )));
            }
            let mut taken = vec![false; m];
            for (i, &v) in row.iter().enumerate() {
                if v as usize > m {
                    return Err(Error::InvalidAssociation(format!(
                        "scan {} row {}: value {} out of range",
                        t, i, v
                    )));
                }
                if v == 0 {
                    continue;
                }
                let j = (v - 1) as usize;
                if taken[j] {
                    return Err(Error::InvalidAssociation(format!(
                        "scan {}: measurement {} assigned twice",
                        t, j
                    )));
                }
                taken[j] = true;
                if i >= n {
                    // Trailing row: only the measurement's own row may start it.
                    if i - n != j {
                        return Err(Error::InvalidAssociation(format!(
                            "scan {} trailing row {} cannot take measurement {}",
                            t,
                            i - n,
                            j
                        )));
                    }
                    let slot = theta.cum[t] + j as u32;
                    theta.histories[slot as usize].push((t as u16, j as u16));
                    theta.owner[t][j] = slot;
                } else {
                    let slot = i as u32;
                    if theta.histories[slot as usize].is_empty() {
                        return Err(Error::InvalidAssociation(format!(
                            "scan {}: assignment to slot {} which was never started",
                            t, i
                        )));
                    }
                    theta.histories[slot as usize].push((t as u16, j as u16));
                    theta.owner[t][j] = slot;
                }
                theta.digest ^= entry_hash(t, i, v);
            }
            for (j, &t_taken) in taken.iter().enumerate() {
                if !t_taken {
                    return Err(Error::InvalidAssociation(format!(
                        "scan {}: measurement {} unassigned",
                        t, j
                    )));
                }
            }
        }
        for (slot, hist) in theta.histories.iter().enumerate() {
            match hist.len() {
                0 => {}
                1 => theta.detected.insert(slot as u32),
                _ => {
                    theta.detected.insert(slot as u32);
                    theta.confirmed.insert(slot as u32);
                }
            }
        }
        theta.rows = rows;
        Ok(theta)
    }

    /// Re-checks all structural rules; the fast edit path maintains them, so
    /// this is for tests and untrusted input.
    pub fn validate(&self, batch: &Batch) -> Result<()> {
        let rebuilt = Theta::from_rows(batch, self.rows.clone())?;
        if rebuilt.histories != self.histories
            || rebuilt.digest != self.digest
            || rebuilt.owner != self.owner
        {
            return Err(Error::InvalidAssociation(
                "cached views out of sync with rows".into(),
            ));
        }
        Ok(())
    }

    pub fn num_scans(&self) -> usize {
        self.rows.len()
    }

    /// Tracks existing before scan `k` (leading entries of row `k`).
    pub fn existing(&self, k: usize) -> usize {
        self.cum[k] as usize
    }

    pub fn num_slots(&self) -> usize {
        self.histories.len()
    }

    pub fn value(&self, k: usize, i: usize) -> u16 {
        self.rows[k][i]
    }

    pub fn owner_of(&self, key: MeasKey) -> u32 {
        self.owner[key.0 as usize][key.1 as usize]
    }

    pub fn history(&self, slot: u32) -> &[MeasKey] {
        &self.histories[slot as usize]
    }

    pub fn slot_of(&self, key: MeasKey) -> u32 {
        self.cum[key.0 as usize] + key.1 as u32
    }

    pub fn key_of(&self, slot: u32) -> MeasKey {
        let t = match self.cum.binary_search(&slot) {
            Ok(mut i) => {
                while i + 1 < self.cum.len() && self.cum[i + 1] == slot {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        (t as u16, (slot - self.cum[t]) as u16)
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Slots with at least one detection.
    pub fn detected_slots(&self) -> &[u32] {
        self.detected.as_slice()
    }

    /// Slots with at least two detections.
    pub fn confirmed_slots(&self) -> &[u32] {
        self.confirmed.as_slice()
    }

    pub fn is_confirmed(&self, slot: u32) -> bool {
        self.confirmed.contains(slot)
    }

    /// The slot's history with its entry at scan `k` replaced by measurement
    /// `v - 1`, removed when `v` is 0. Scan order is preserved.
    pub fn history_with(&self, slot: u32, k: usize, v: u16) -> History {
        let hist = &self.histories[slot as usize];
        let mut out = Vec::with_capacity(hist.len() + 1);
        let mut placed = false;
        for &key in hist {
            if (key.0 as usize) == k {
                continue;
            }
            if !placed && v > 0 && (key.0 as usize) > k {
                out.push((k as u16, v - 1));
                placed = true;
            }
            out.push(key);
        }
        if !placed && v > 0 {
            out.push((k as u16, v - 1));
        }
        out
    }

    fn sync_sets(&mut self, slot: u32, old_len: usize, new_len: usize) {
        if old_len == new_len {
            return;
        }
        if new_len >= 1 {
            self.detected.insert(slot);
        } else {
            self.detected.remove(slot);
        }
        if new_len >= 2 {
            self.confirmed.insert(slot);
        } else {
            self.confirmed.remove(slot);
        }
    }

    /// Removes scan-`k` entry from a slot's history.
    fn hist_remove(&mut self, slot: u32, k: usize) {
        let hist = &mut self.histories[slot as usize];
        let old_len = hist.len();
        hist.retain(|key| (key.0 as usize) != k);
        debug_assert_eq!(hist.len() + 1, old_len);
        let new_len = old_len - 1;
        self.sync_sets(slot, old_len, new_len);
    }

    /// Inserts (k, j) into a slot's history, keeping scan order.
    fn hist_insert(&mut self, slot: u32, k: usize, j: u16) {
        let hist = &mut self.histories[slot as usize];
        let old_len = hist.len();
        let at = hist.partition_point(|key| (key.0 as usize) < k);
        debug_assert!(at == hist.len() || hist[at].0 as usize != k);
        hist.insert(at, (k as u16, j));
        self.sync_sets(slot, old_len, old_len + 1);
    }

    /// Sets the leading entry `rows[k][i] = v`, repairing the trailing rows it
    /// disturbs: a released measurement reverts to starting its own track, a
    /// taken one stops doing so. Requires a feasible edit: `i` is a started
    /// slot existing before `k`, and the taken measurement is currently owned
    /// by its own slot with no later detections. Returns the previous value.
    pub fn apply_set(&mut self, k: usize, i: usize, v: u16) -> u16 {
        let n = self.existing(k);
        debug_assert!(i < n, "leading entries only");
        let old = self.rows[k][i];
        if old == v {
            return old;
        }
        debug_assert!(!self.histories[i].is_empty(), "slot {} never started", i);
        if old > 0 {
            // Release: the measurement goes back to its own trailing row.
            let j = old - 1;
            let own = self.slot_of((k as u16, j));
            debug_assert!(self.histories[own as usize].is_empty());
            self.hist_remove(i as u32, k);
            self.hist_insert(own, k, j);
            self.rows[k][n + j as usize] = old;
            self.owner[k][j as usize] = own;
            self.digest ^= entry_hash(k, i, old);
            self.digest ^= entry_hash(k, n + j as usize, old);
        }
        if v > 0 {
            // Take: the measurement leaves its own trailing row.
            let j = v - 1;
            let own = self.slot_of((k as u16, j));
            debug_assert_eq!(self.owner[k][j as usize], own, "measurement not free");
            debug_assert_eq!(self.histories[own as usize].len(), 1, "own slot not a singleton");
            self.hist_remove(own, k);
            self.hist_insert(i as u32, k, j);
            self.rows[k][n + j as usize] = 0;
            self.owner[k][j as usize] = i as u32;
            self.digest ^= entry_hash(k, n + j as usize, v);
            self.digest ^= entry_hash(k, i, v);
        }
        self.rows[k][i] = v;
        old
    }

    /// Serializes as one line of space-separated entries per scan.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                out.push_str(&v.to_string());
                first = false;
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`Theta::to_text`] format and validates it against the batch.
    pub fn from_text(batch: &Batch, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut row = Vec::new();
            for tok in line.split_whitespace() {
                let v: u16 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad entry {:?}", ln + 1, tok)))?;
                row.push(v);
            }
            rows.push(row);
        }
        // Scans whose row is entirely empty serialize as blank lines; trailing
        // blank lines may be eaten by text transport, so pad to the scan count.
        while rows.len() < batch.num_scans() {
            rows.push(Vec::new());
        }
        Theta::from_rows(batch, rows)
    }

    /// Unnormalized posterior log-weight: the sum of final track weights over
    /// all started slots (null slots contribute zero).
    pub fn log_pi(&self, problem: &Problem, cache: &mut WeightCache) -> f64 {
        self.histories
            .iter()
            .map(|h| final_info(problem, h, cache).log_weight)
            .sum()
    }
}
