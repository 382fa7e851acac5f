//! Plan-file and CSV formats for the optimizer CLI.
//!
//! The plan file is versioned and line-oriented:
//!
//! ```text
//! spec-plan v1
//! kind leaf
//! n 256
//! k 6
//! cost 123456
//! splits 1 2 5 18 146
//! capacities 1 2 5 18 146 256
//! map 1 2 2 5 5 ...          # one entry per type, the remapped capacity
//! ```
//!
//! Histogram CSVs are `occupancy,count` rows; sweep CSVs are
//! `k,cost,capacities` rows.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::specialization::dp::SpecializationPlan;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanFile {
    pub kind: String,
    pub plan: SpecializationPlan,
}

impl PlanFile {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("writing plan file", e);
        writeln!(out, "spec-plan v1").map_err(io)?;
        writeln!(out, "kind {}", self.kind).map_err(io)?;
        writeln!(out, "n {}", self.plan.n).map_err(io)?;
        writeln!(out, "k {}", self.plan.k).map_err(io)?;
        writeln!(out, "cost {}", self.plan.total_cost).map_err(io)?;
        writeln!(out, "splits {}", join(&self.plan.splits)).map_err(io)?;
        writeln!(out, "capacities {}", join(&self.plan.capacities())).map_err(io)?;
        writeln!(out, "map {}", join(&self.plan.remapped)).map_err(io)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl BufRead) -> Result<PlanFile> {
        let mut lines = Vec::new();
        for line in input.lines() {
            lines.push(line.map_err(|e| Error::io("reading plan file", e))?);
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines.iter().skip(1) {
            if let Some((key, rest)) = line.split_once(' ') {
                fields.insert(key.to_string(), rest.to_string());
            }
        }
        if lines.first().map(String::as_str) != Some("spec-plan v1") {
            return Err(Error::Decode("unsupported plan file header".into()));
        }
        let parse_usize = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| Error::Decode(format!("plan file missing `{key}`")))?
                .parse()
                .map_err(|_| Error::Decode(format!("invalid `{key}` in plan file")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::Decode(format!("plan file missing `{key}`")))?;
            raw.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Decode(format!("invalid `{key}` entry `{t}`")))
                })
                .collect()
        };

        let n = parse_usize("n")?;
        let k = parse_usize("k")?;
        let cost: u128 = fields
            .get("cost")
            .ok_or_else(|| Error::Decode("plan file missing `cost`".into()))?
            .parse()
            .map_err(|_| Error::Decode("invalid `cost` in plan file".into()))?;
        let splits = parse_list("splits")?;
        let remapped = parse_list("map")?;
        if remapped.len() != n {
            return Err(Error::Decode("plan map length differs from n".into()));
        }

        // Reconstruct the pre-remap mapping from the splits.
        let mut mapping = Vec::with_capacity(n);
        let mut cursor = 0;
        for i in 1..=n {
            while cursor < splits.len() && i > splits[cursor] {
                cursor += 1;
            }
            mapping.push(if cursor < splits.len() { splits[cursor] } else { n });
        }

        Ok(PlanFile {
            kind: fields.get("kind").cloned().unwrap_or_default(),
            plan: SpecializationPlan {
                n,
                k,
                splits,
                mapping,
                remapped,
                total_cost: cost,
            },
        })
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `occupancy,count` rows into counts indexed by occupancy. Rows may
/// be unordered and sparse; missing occupancies count zero. A header row of
/// `occupancy,count` is permitted.
pub fn read_histogram_csv(input: &mut impl BufRead, n: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; n];
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading histogram csv", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == "occupancy,count" {
            continue;
        }
        let (occ, count) = trimmed.split_once(',').ok_or_else(|| Error::Workload {
            line: lineno + 1,
            msg: "expected `occupancy,count`".into(),
        })?;
        let occ: usize = occ.trim().parse().map_err(|_| Error::Workload {
            line: lineno + 1,
            msg: format!("invalid occupancy `{occ}`"),
        })?;
        let count: u64 = count.trim().parse().map_err(|_| Error::Workload {
            line: lineno + 1,
            msg: format!("invalid count `{count}`"),
        })?;
        if occ == 0 || occ > n {
            return Err(Error::Workload {
                line: lineno + 1,
                msg: format!("occupancy {occ} outside 1..={n}"),
            });
        }
        counts[occ - 1] += count;
    }
    Ok(counts)
}

pub fn write_sweep_csv(
    rows: &[(usize, u128, SpecializationPlan)],
    out: &mut impl Write,
) -> Result<()> {
    let io = |e| Error::io("writing sweep csv", e);
    writeln!(out, "k,cost,capacities").map_err(io)?;
    for (k, cost, plan) in rows {
        let caps = plan
            .capacities()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{k},{cost},{caps}").map_err(io)?;
    }
    Ok(())
}
