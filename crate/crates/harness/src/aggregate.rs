//! Windowed aggregation of run logs into a summary CSV: per-window means
//! per seed, then mean ± std across seeds for every numeric column.

use crate::runlog::RunLog;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Window index of a 1-based step for the given window size: steps
/// `1..=window` land in window 0, so boundaries fall at multiples of the
/// window size.
fn window_of(step: u64, window: u64) -> u64 {
    step.saturating_sub(1) / window
}

/// Numeric columns of one row: top-level numbers plus the per-layer metrics
/// flattened to `m<module>_<metric>` (one column per metric per layer).
fn numeric_fields(row: &serde_json::Map<String, serde_json::Value>) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, v) in row {
        if k == "step" {
            continue;
        }
        if let Some(x) = v.as_f64() {
            out.push((k.clone(), x));
        } else if k == "layers" {
            if let Some(layers) = v.as_array() {
                for layer in layers {
                    let Some(obj) = layer.as_object() else { continue };
                    let Some(module) = obj.get("module").and_then(|m| m.as_u64()) else {
                        continue;
                    };
                    for (lk, lv) in obj {
                        if lk == "module" {
                            continue;
                        }
                        if let Some(x) = lv.as_f64() {
                            out.push((format!("m{module}_{lk}"), x));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Aggregate homogeneous logs (same config hash) into CSV text.
pub fn aggregate(logs: &[RunLog], window: u64) -> anyhow::Result<String> {
    anyhow::ensure!(!logs.is_empty(), "no logs to aggregate");
    anyhow::ensure!(window > 0, "window must be positive");
    let hash = &logs[0].header.config_hash;
    for log in logs {
        anyhow::ensure!(
            &log.header.config_hash == hash,
            "heterogeneous configs: {} vs {} (seed {})",
            hash,
            log.header.config_hash,
            log.header.seed
        );
    }
    // Union of numeric column names, skipping the step column itself.
    let mut fields: Vec<String> = Vec::new();
    for log in logs {
        for row in &log.rows {
            for (k, _) in numeric_fields(row) {
                if !fields.contains(&k) {
                    fields.push(k);
                }
            }
        }
    }
    fields.sort();

    // Per log: window -> field -> (sum, count).
    type Acc = BTreeMap<u64, BTreeMap<String, (f64, u64)>>;
    let mut per_log: Vec<Acc> = Vec::with_capacity(logs.len());
    for log in logs {
        let mut acc: Acc = BTreeMap::new();
        for row in &log.rows {
            let Some(step) = row.get("step").and_then(|v| v.as_u64()) else {
                continue;
            };
            let w = window_of(step, window);
            let entry = acc.entry(w).or_default();
            for (k, x) in numeric_fields(row) {
                let e = entry.entry(k).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
            }
        }
        per_log.push(acc);
    }
    let mut windows: Vec<u64> = per_log.iter().flat_map(|a| a.keys().cloned()).collect();
    windows.sort_unstable();
    windows.dedup();

    let mut out = String::new();
    write!(out, "window_start,window_end")?;
    for f in &fields {
        write!(out, ",{f}_mean,{f}_std")?;
    }
    writeln!(out)?;
    for &w in &windows {
        write!(out, "{},{}", w * window, (w + 1) * window)?;
        for f in &fields {
            let seed_means: Vec<f64> = per_log
                .iter()
                .filter_map(|acc| acc.get(&w).and_then(|m| m.get(f)))
                .map(|(sum, n)| sum / *n as f64)
                .collect();
            if seed_means.is_empty() {
                write!(out, ",,")?;
                continue;
            }
            let n = seed_means.len() as f64;
            let mean = seed_means.iter().sum::<f64>() / n;
            let var = seed_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
            write!(out, ",{mean},{}", var.sqrt())?;
        }
        writeln!(out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runlog::RunHeader;

    fn fake_log(seed: u64, values: &[(u64, f64)]) -> RunLog {
        RunLog {
            header: RunHeader {
                config_hash: "h".into(),
                seed,
                version: "0".into(),
                timestamp: 0,
            },
            rows: values
                .iter()
                .map(|(step, loss)| {
                    serde_json::from_value(serde_json::json!({"step": step, "loss": loss}))
                        .unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn single_seed_has_zero_std() {
        let log = fake_log(0, &[(100, 1.0), (200, 3.0), (1100, 5.0)]);
        let csv = aggregate(&[log], 1000).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "window_start,window_end,loss_mean,loss_std");
        // Window [1, 1000]: mean of 1 and 3; std over one seed is 0.
        assert_eq!(lines.next().unwrap(), "0,1000,2,0");
        assert_eq!(lines.next().unwrap(), "1000,2000,5,0");
    }

    #[test]
    fn constant_metric_across_seeds_has_zero_std() {
        let logs: Vec<RunLog> = (0..5).map(|s| fake_log(s, &[(500, 2.5)])).collect();
        let csv = aggregate(&logs, 1000).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1000,2.5,0"));
    }

    #[test]
    fn window_boundaries_at_multiples() {
        // Step 1000 belongs to the first window, 1001 to the second.
        let log = fake_log(0, &[(1000, 1.0), (1001, 2.0)]);
        let csv = aggregate(&[log], 1000).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("0,1000,1"));
        assert!(lines[2].starts_with("1000,2000,2"));
    }

    #[test]
    fn per_layer_metrics_become_columns() {
        let mut log = fake_log(0, &[(100, 1.0)]);
        log.rows[0].insert(
            "layers".into(),
            serde_json::json!([
                {"module": 1, "dead_frac": 0.25, "eff_rank": 3.5},
                {"module": 3, "dead_frac": 0.5, "eff_rank": 2.0}
            ]),
        );
        let csv = aggregate(&[log], 1000).unwrap();
        let header = csv.lines().next().unwrap();
        for col in ["m1_dead_frac_mean", "m1_eff_rank_mean", "m3_dead_frac_mean"] {
            assert!(header.contains(col), "{header}");
        }
        let row = csv.lines().nth(1).unwrap();
        assert!(row.contains("0.25") && row.contains("3.5"));
    }

    #[test]
    fn heterogeneous_configs_are_rejected() {
        let a = fake_log(0, &[(100, 1.0)]);
        let mut b = fake_log(1, &[(100, 1.0)]);
        b.header.config_hash = "other".into();
        assert!(aggregate(&[a, b], 1000).is_err());
    }
}
