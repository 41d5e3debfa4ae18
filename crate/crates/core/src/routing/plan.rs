use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::CombineRoute;

use super::balance::LoadStats;
use super::select::Selections;

/// One (token, selection-rank) pair and where it landed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub token: usize,
    pub rank: usize,
    pub expert: usize,
    /// `None` when the expert was already full and the selection was dropped.
    pub slot: Option<usize>,
    pub weight: f64,
}

impl Assignment {
    pub fn dropped(&self) -> bool {
        self.slot.is_none()
    }
}

/// Capacity-constrained assignment of token selections to expert slots.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPlan {
    num_tokens: usize,
    num_experts: usize,
    capacity: usize,
    /// Token-major, rank order within a token.
    assignments: Vec<Assignment>,
    /// Offsets into `assignments` per token (length `num_tokens + 1`).
    token_offsets: Vec<usize>,
    /// Per expert, the token occupying each filled slot.
    slot_tokens: Vec<Vec<usize>>,
}

/// Assigns slots first come first served: ascending token order, then
/// selection rank within a token. Selections hitting a full expert are
/// dropped. A pure function of its inputs.
pub fn build_dispatch_plan(selections: &Selections, capacity: usize) -> DispatchPlan {
    let n = selections.num_experts;
    let mut slot_tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut assignments = Vec::with_capacity(selections.total());
    let mut token_offsets = Vec::with_capacity(selections.num_tokens() + 1);
    token_offsets.push(0);
    for (token, choices) in selections.per_token.iter().enumerate() {
        for (rank, c) in choices.iter().enumerate() {
            let filled = &mut slot_tokens[c.expert];
            let slot = (filled.len() < capacity).then(|| {
                filled.push(token);
                filled.len() - 1
            });
            assignments.push(Assignment {
                token,
                rank,
                expert: c.expert,
                slot,
                weight: c.weight,
            });
        }
        token_offsets.push(assignments.len());
    }
    DispatchPlan {
        num_tokens: selections.num_tokens(),
        num_experts: n,
        capacity,
        assignments,
        token_offsets,
        slot_tokens,
    }
}

impl DispatchPlan {
    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn token(&self, t: usize) -> &[Assignment] {
        &self.assignments[self.token_offsets[t]..self.token_offsets[t + 1]]
    }

    /// Real (non-padding) tokens held by each expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        self.slot_tokens.iter().map(Vec::len).collect()
    }

    pub fn padding(&self, expert: usize) -> usize {
        self.capacity - self.slot_tokens[expert].len()
    }

    pub fn total_selections(&self) -> usize {
        self.assignments.len()
    }

    pub fn dropped_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.dropped()).count()
    }

    pub fn dropped_fraction(&self) -> f64 {
        if self.assignments.is_empty() {
            0.0
        } else {
            self.dropped_count() as f64 / self.assignments.len() as f64
        }
    }

    pub fn fully_dropped(&self, t: usize) -> bool {
        self.token(t).iter().all(Assignment::dropped)
    }

    pub fn fully_dropped_tokens(&self) -> usize {
        (0..self.num_tokens).filter(|&t| self.fully_dropped(t)).count()
    }

    /// Source token for each of the expert's `C` buffer rows, `None` for padding.
    pub fn buffer_rows(&self, expert: usize) -> Vec<Option<usize>> {
        let mut rows: Vec<Option<usize>> = self.slot_tokens[expert].iter().copied().map(Some).collect();
        rows.resize(self.capacity, None);
        rows
    }

    /// Surviving contributions per token, for [`crate::numerics::Graph::combine`].
    pub fn combine_routes(&self) -> Vec<Vec<CombineRoute>> {
        (0..self.num_tokens)
            .map(|t| {
                self.token(t)
                    .iter()
                    .filter_map(|a| {
                        a.slot.map(|slot| CombineRoute {
                            column: a.rank,
                            expert: a.expert,
                            slot,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn load_stats(&self) -> LoadStats {
        LoadStats::from_counts(&self.expert_counts())
    }

    /// Line-oriented dump: a header, then `token rank expert slot weight dropped`
    /// per selection, with `-` for the slot of a dropped selection.
    pub fn to_dump(&self) -> String {
        let mut s = format!(
            "# dispatch-plan tokens={} experts={} capacity={}\n# token rank expert slot weight dropped\n",
            self.num_tokens, self.num_experts, self.capacity
        );
        for a in &self.assignments {
            let slot = a.slot.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                a.token,
                a.rank,
                a.expert,
                slot,
                a.weight,
                u8::from(a.dropped())
            );
        }
        s
    }

    /// Parses [`Self::to_dump`] output, re-checking every plan invariant.
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Input("empty plan dump".into()))?;
        let field = |name: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|w| w.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Input(format!("plan dump header lacks `{name}`")))
        };
        let (num_tokens, num_experts, capacity) = (field("tokens")?, field("experts")?, field("capacity")?);
        let mut slot_tokens: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
        let mut assignments = Vec::new();
        let mut token_offsets = vec![0];
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Input(format!("plan dump line {}: {what}", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let (token, rank, expert) = (num(f[0])?, num(f[1])?, num(f[2])?);
            let slot = if f[3] == "-" { None } else { Some(num(f[3])?) };
            let weight: f64 = f[4].parse().map_err(|_| bad("bad weight"))?;
            if (f[5] == "1") != slot.is_none() {
                return Err(bad("drop flag disagrees with slot"));
            }
            if token >= num_tokens || expert >= num_experts {
                return Err(bad("token or expert out of range"));
            }
            while token_offsets.len() <= token {
                token_offsets.push(assignments.len());
            }
            if token + 1 != token_offsets.len() || rank != assignments.len() - token_offsets[token] {
                return Err(bad("selections out of order"));
            }
            if let Some(s) = slot {
                if s >= capacity || s != slot_tokens[expert].len() {
                    return Err(bad("slot out of sequence or beyond capacity"));
                }
                slot_tokens[expert].push(token);
            }
            assignments.push(Assignment {
                token,
                rank,
                expert,
                slot,
                weight,
            });
        }
        while token_offsets.len() <= num_tokens {
            token_offsets.push(assignments.len());
        }
        Ok(Self {
            num_tokens,
            num_experts,
            capacity,
            assignments,
            token_offsets,
            slot_tokens,
        })
    }
}
