//! Chain ingestion and result export.
//!
//! Chains travel as CSV with columns `individual_id,t,y,x_1..x_p,z_index`
//! (rows grouped by individual and sorted by time; the first row of each
//! group is the initial observation). Fits export as a JSON parameter file
//! with deterministic key order and 17-significant-digit numbers, plus
//! decoded-label and log-likelihood-trace CSVs.

use nalgebra::DVector;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::em::{FitResult, Method};
use crate::error::{Error, Result};
use crate::model::{Chain, ModelParams, ObservationRecord, StateModel};

/// How elapsed times are derived from timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Unit spacing required; any other spacing is an error.
    Discrete,
    /// Elapsed times taken from the timestamps; gaps above 24h split the
    /// individual into separate chains.
    Heterogeneous,
}

/// Gap length (hours) above which an individual's record splits into a new
/// chain in heterogeneous mode.
pub const SPLIT_GAP_HOURS: f64 = 24.0;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        source,
    }
}

struct RawRow {
    line: usize,
    individual: String,
    t: f64,
    y: u64,
    x: Vec<f64>,
    z_index: Option<usize>,
}

/// Loads chains from CSV, computing elapsed times and applying the gap
/// rules of the selected mode.
pub fn load_chains(path: &Path, mode: LoadMode) -> Result<Vec<Chain>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let idx_id = find("individual_id").ok_or_else(|| Error::Schema {
        row: 1,
        msg: "missing individual_id column".into(),
    })?;
    let idx_t = find("t").ok_or_else(|| Error::Schema {
        row: 1,
        msg: "missing t column".into(),
    })?;
    let idx_y = find("y").ok_or_else(|| Error::Schema {
        row: 1,
        msg: "missing y column".into(),
    })?;
    let mut x_cols = Vec::new();
    loop {
        match find(&format!("x_{}", x_cols.len() + 1)) {
            Some(i) => x_cols.push(i),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::Schema {
            row: 1,
            msg: "no covariate columns x_1.. found".into(),
        });
    }
    let idx_z = find("z_index");

    let mut rows: Vec<RawRow> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| csv_err(path, e))?;
        let parse_f64 = |idx: usize, what: &str| -> Result<f64> {
            record
                .get(idx)
                .ok_or_else(|| Error::Schema {
                    row: line,
                    msg: format!("missing {what}"),
                })?
                .parse::<f64>()
                .map_err(|e| Error::Schema {
                    row: line,
                    msg: format!("bad {what}: {e}"),
                })
        };
        let t = parse_f64(idx_t, "t")?;
        let y = parse_f64(idx_y, "y")? as u64;
        let x = x_cols
            .iter()
            .enumerate()
            .map(|(k, &idx)| parse_f64(idx, &format!("x_{}", k + 1)))
            .collect::<Result<Vec<f64>>>()?;
        let z_index = match idx_z {
            Some(idx) => {
                let field = record.get(idx).unwrap_or("");
                if field.is_empty() {
                    None
                } else {
                    Some(field.parse::<usize>().map_err(|e| Error::Schema {
                        row: line,
                        msg: format!("bad z_index: {e}"),
                    })?)
                }
            }
            None => None,
        };
        rows.push(RawRow {
            line,
            individual: record.get(idx_id).unwrap_or("").to_string(),
            t,
            y,
            x,
            z_index,
        });
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }

    // Rows must be grouped by individual: an id may not reappear after a
    // different one.
    let mut seen: Vec<&str> = Vec::new();
    for row in &rows {
        match seen.last() {
            Some(&last) if last == row.individual => {}
            _ => {
                if seen.contains(&row.individual.as_str()) {
                    return Err(Error::Schema {
                        row: row.line,
                        msg: format!(
                            "individual {} reappears after other individuals; rows must be grouped",
                            row.individual
                        ),
                    });
                }
                seen.push(&row.individual);
            }
        }
    }

    let q = rows
        .iter()
        .filter_map(|r| r.z_index)
        .max()
        .map_or(0, |m| m + 1);

    let mut chains = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let mut end = start + 1;
        while end < rows.len() && rows[end].individual == rows[start].individual {
            end += 1;
        }
        let group = &rows[start..end];
        for pair in group.windows(2) {
            if pair[1].t == pair[0].t {
                return Err(Error::Schema {
                    row: pair[1].line,
                    msg: format!("duplicate timestamp {} for {}", pair[1].t, pair[1].individual),
                });
            }
            if pair[1].t < pair[0].t {
                return Err(Error::Schema {
                    row: pair[1].line,
                    msg: format!(
                        "timestamps not sorted for {} ({} after {})",
                        pair[1].individual, pair[1].t, pair[0].t
                    ),
                });
            }
        }

        // Segment at gaps above the split threshold (heterogeneous mode).
        let mut segments: Vec<&[RawRow]> = Vec::new();
        let mut seg_start = 0;
        for j in 1..group.len() {
            let gap = group[j].t - group[j - 1].t;
            if mode == LoadMode::Heterogeneous && gap > SPLIT_GAP_HOURS {
                segments.push(&group[seg_start..j]);
                seg_start = j;
            }
        }
        segments.push(&group[seg_start..]);
        let split = segments.len() > 1;

        for (seg_idx, seg) in segments.into_iter().enumerate() {
            let id = if split {
                format!("{}#{}", group[0].individual, seg_idx + 1)
            } else {
                group[0].individual.clone()
            };
            let first = &seg[0];
            let mut records = Vec::with_capacity(seg.len().saturating_sub(1));
            for j in 1..seg.len() {
                let delta = seg[j].t - seg[j - 1].t;
                let delta = if mode == LoadMode::Discrete {
                    if (delta - 1.0).abs() > 1e-9 {
                        return Err(Error::Schema {
                            row: seg[j].line,
                            msg: format!(
                                "discrete mode requires unit spacing; got Δ = {delta} for {}",
                                seg[j].individual
                            ),
                        });
                    }
                    1.0
                } else {
                    delta
                };
                records.push(ObservationRecord {
                    t: seg[j].t,
                    delta,
                    x: seg[j].x.clone(),
                    z_index: seg[j].z_index,
                    y: seg[j].y,
                });
            }
            chains.push(Chain {
                id,
                t0: first.t,
                y0: first.y,
                x0: first.x.clone(),
                z0: first.z_index,
                q,
                records,
            });
        }
        start = end;
    }
    Ok(chains)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes chains in the CSV schema read by [`load_chains`].
pub fn write_chains(path: &Path, chains: &[Chain]) -> Result<()> {
    let mut out = String::new();
    let p = chains.first().map_or(0, |c| c.p());
    out.push_str("individual_id,t,y");
    for i in 1..=p {
        let _ = write!(out, ",x_{i}");
    }
    out.push_str(",z_index\n");
    for chain in chains {
        let z0 = chain.z0.map(|z| z.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{},{}", chain.id, fmt_f64(chain.t0), chain.y0);
        for v in &chain.x0 {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, ",{z0}");
        for rec in &chain.records {
            let z = rec.z_index.map(|z| z.to_string()).unwrap_or_default();
            let _ = write!(out, "{},{},{}", chain.id, fmt_f64(rec.t), rec.y);
            for v in &rec.x {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            let _ = writeln!(out, ",{z}");
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Writes true state labels (1-based) alongside simulated chains.
pub fn write_labels(path: &Path, chains: &[Chain], labels: &[Vec<usize>]) -> Result<()> {
    let mut out = String::from("individual_id,t,state\n");
    for (chain, labs) in chains.iter().zip(labels) {
        let _ = writeln!(out, "{},{},{}", chain.id, fmt_f64(chain.t0), labs[0] + 1);
        for (rec, &s) in chain.records.iter().zip(&labs[1..]) {
            let _ = writeln!(out, "{},{},{}", chain.id, fmt_f64(rec.t), s + 1);
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn json_f64(x: f64) -> String {
    if x.is_finite() {
        fmt_f64(x)
    } else {
        "null".to_string()
    }
}

fn json_vec(v: &DVector<f64>) -> String {
    let inner: Vec<String> = v.iter().map(|&x| json_f64(x)).collect();
    format!("[{}]", inner.join(","))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// Exports a fit: `params.json` (stable key order, 17 significant digits),
/// `decoded.csv` (one row per record with posteriors), and
/// `loglik_trace.csv`. Returns the written paths.
pub fn export_fit(
    result: &FitResult,
    chains: &[Chain],
    method: Method,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut artifacts = Vec::new();

    // params.json written by hand for deterministic key order and numeric
    // formatting.
    let method_str = match method {
        Method::Pmm => "pmm",
        Method::DtHmm => "dt",
        Method::CtHmm => "ct",
        Method::PhHmm => "ph",
    };
    let mut js = String::new();
    js.push_str("{\n");
    let _ = writeln!(js, "  \"schema_version\": 1,");
    let _ = writeln!(js, "  \"method\": \"{method_str}\",");
    let _ = writeln!(js, "  \"n_states\": {},", result.params.k());
    let _ = writeln!(js, "  \"converged\": {},", result.converged);
    let _ = writeln!(js, "  \"iterations\": {},", result.iterations);
    let final_ll = result.loglik_trace.last().copied().unwrap_or(f64::NAN);
    let _ = writeln!(js, "  \"final_loglik\": {},", json_f64(final_ll));
    js.push_str("  \"states\": [\n");
    for (s, state) in result.params.states.iter().enumerate() {
        js.push_str("    {\n");
        let _ = writeln!(js, "      \"mu\": {},", json_f64(state.mu));
        let sigma2 = if state.b.is_empty() {
            "null".to_string()
        } else {
            json_f64(state.sigma2)
        };
        let _ = writeln!(js, "      \"sigma2\": {sigma2},");
        let betas: Vec<String> = state.betas.iter().map(json_vec).collect();
        let _ = writeln!(js, "      \"beta\": [{}],", betas.join(","));
        let _ = writeln!(js, "      \"b\": {},", json_vec(&state.b));
        let se = result
            .se
            .get(s)
            .filter(|se| !se.is_empty())
            .map(|se| {
                let inner: Vec<String> = se.iter().map(|&x| json_f64(x)).collect();
                format!("[{}]", inner.join(","))
            })
            .unwrap_or_else(|| "null".to_string());
        let _ = writeln!(js, "      \"se_beta\": {se}");
        js.push_str(if s + 1 < result.params.k() {
            "    },\n"
        } else {
            "    }\n"
        });
    }
    js.push_str("  ],\n");
    js.push_str("  \"delta0\": [\n");
    for (i, (chain, delta)) in chains.iter().zip(&result.params.delta0).enumerate() {
        let _ = write!(
            js,
            "    {{\"chain\": {}, \"delta\": {}}}",
            json_str(&chain.id),
            json_vec(delta)
        );
        js.push_str(if i + 1 < chains.len() { ",\n" } else { "\n" });
    }
    js.push_str("  ],\n");
    let warnings: Vec<String> = result.warnings.iter().map(|w| json_str(w)).collect();
    let _ = writeln!(js, "  \"warnings\": [{}]", warnings.join(","));
    js.push_str("}\n");
    let params_path = dir.join("params.json");
    fs::write(&params_path, js).map_err(|e| io_err(&params_path, e))?;
    artifacts.push(params_path);

    // Decoded labels and posteriors.
    let decoded_path = dir.join("decoded.csv");
    let k = result.params.k();
    let mut out = String::from("chain,record,t,label");
    for s in 1..=k {
        let _ = write!(out, ",u_{s}");
    }
    out.push('\n');
    for ((chain, decoded), post) in chains
        .iter()
        .zip(&result.decoded)
        .zip(&result.posterior)
    {
        for j in 0..=chain.n() {
            let t = if j == 0 { chain.t0 } else { chain.records[j - 1].t };
            let _ = write!(out, "{},{},{},{}", chain.id, j, fmt_f64(t), decoded[j] + 1);
            for s in 0..k {
                let _ = write!(out, ",{}", fmt_f64(post.u[j][s]));
            }
            out.push('\n');
        }
    }
    fs::write(&decoded_path, &out).map_err(|e| io_err(&decoded_path, e))?;
    artifacts.push(decoded_path);

    // Log-likelihood trace.
    let trace_path = dir.join("loglik_trace.csv");
    let mut out = String::from("iteration,loglik\n");
    for (i, ll) in result.loglik_trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_f64(*ll));
    }
    fs::write(&trace_path, out).map_err(|e| io_err(&trace_path, e))?;
    artifacts.push(trace_path);

    Ok(artifacts)
}

/// Parameters reloaded from an exported `params.json`.
#[derive(Debug, Clone)]
pub struct LoadedParams {
    pub method: Method,
    pub params: ModelParams,
    /// Chain ids in the order their initial distributions were written.
    pub chain_ids: Vec<String>,
    pub converged: bool,
}

/// Reads a `params.json` produced by [`export_fit`].
pub fn load_params(path: &Path) -> Result<LoadedParams> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |msg: &str| Error::Schema {
        row: 0,
        msg: format!("{}: {msg}", path.display()),
    };
    let method = match v["method"].as_str() {
        Some("pmm") => Method::Pmm,
        Some("dt") => Method::DtHmm,
        Some("ct") => Method::CtHmm,
        Some("ph") => Method::PhHmm,
        _ => return Err(bad("unknown method")),
    };
    let states_json = v["states"].as_array().ok_or_else(|| bad("missing states"))?;
    let mut states = Vec::with_capacity(states_json.len());
    for s in states_json {
        let mu = s["mu"].as_f64().ok_or_else(|| bad("missing mu"))?;
        let sigma2 = s["sigma2"].as_f64().unwrap_or(1.0);
        let betas = s["beta"]
            .as_array()
            .ok_or_else(|| bad("missing beta"))?
            .iter()
            .map(|b| {
                let vals: Option<Vec<f64>> =
                    b.as_array().map(|a| a.iter().filter_map(|x| x.as_f64()).collect());
                vals.map(DVector::from_vec).ok_or_else(|| bad("bad beta entry"))
            })
            .collect::<Result<Vec<_>>>()?;
        let b_vals: Vec<f64> = s["b"]
            .as_array()
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
            .unwrap_or_default();
        states.push(StateModel {
            betas,
            b: DVector::from_vec(b_vals),
            sigma2,
            mu,
        });
    }
    let mut chain_ids = Vec::new();
    let mut delta0 = Vec::new();
    for entry in v["delta0"].as_array().ok_or_else(|| bad("missing delta0"))? {
        chain_ids.push(
            entry["chain"]
                .as_str()
                .ok_or_else(|| bad("missing chain id"))?
                .to_string(),
        );
        let d: Vec<f64> = entry["delta"]
            .as_array()
            .ok_or_else(|| bad("missing delta"))?
            .iter()
            .filter_map(|x| x.as_f64())
            .collect();
        delta0.push(DVector::from_vec(d));
    }
    Ok(LoadedParams {
        method,
        params: ModelParams { states, delta0 },
        chain_ids,
        converged: v["converged"].as_bool().unwrap_or(false),
    })
}

/// Appends rows to a CSV file, creating it with the header when absent.
pub fn append_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let exists = path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    if !exists {
        writeln!(file, "{header}").map_err(|e| io_err(path, e))?;
    }
    for row in rows {
        writeln!(file, "{row}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
