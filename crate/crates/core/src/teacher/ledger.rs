use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionResponse, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub model: String,
    pub source: Source,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Wall-clock seconds spent on the call; billed for GPU-time priced models.
    #[serde(default)]
    pub seconds: f64,
}

impl CallRecord {
    /// Only calls that reached a real backend cost anything.
    pub fn is_billable(&self) -> bool {
        self.source == Source::Remote
    }

    pub fn cost(&self, price: &Price) -> f64 {
        if !self.is_billable() {
            return 0.0;
        }
        match *price {
            Price::Tokens {
                prompt_per_1k,
                completion_per_1k,
            } => {
                self.prompt_tokens as f64 / 1000.0 * prompt_per_1k
                    + self.completion_tokens as f64 / 1000.0 * completion_per_1k
            }
            Price::GpuTime { gpu_second } => self.seconds * gpu_second,
        }
    }
}

/// Append-only log of completion calls, shareable across worker threads.
#[derive(Debug, Default)]
pub struct UsageLedger {
    records: Mutex<Vec<CallRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LedgerFile {
    records: Vec<CallRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTotals {
    pub calls: u64,
    pub remote_calls: u64,
    pub cache_hits: u64,
    pub mock_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub billable_prompt_tokens: u64,
    pub billable_completion_tokens: u64,
    pub gpu_seconds: f64,
}

impl UsageLedger {
    pub fn from_records(records: Vec<CallRecord>) -> Self {
        Self {
            records: Mutex::new(records),
        }
    }

    pub fn record(&self, model: &str, response: &CompletionResponse, seconds: f64) {
        self.push(CallRecord {
            model: model.to_string(),
            source: response.source,
            prompt_tokens: response.usage.prompt_tokens,
            completion_tokens: response.usage.completion_tokens,
            seconds: if response.source == Source::Remote { seconds } else { 0.0 },
        });
    }

    pub fn push(&self, record: CallRecord) {
        self.records.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn remote_calls(&self) -> u64 {
        self.records
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.source == Source::Remote)
            .count() as u64
    }

    pub fn totals(&self) -> BTreeMap<String, ModelTotals> {
        let mut out: BTreeMap<String, ModelTotals> = BTreeMap::new();
        for r in self.records.lock().unwrap().iter() {
            let t = out.entry(r.model.clone()).or_default();
            t.calls += 1;
            t.prompt_tokens += r.prompt_tokens;
            t.completion_tokens += r.completion_tokens;
            match r.source {
                Source::Remote => {
                    t.remote_calls += 1;
                    t.billable_prompt_tokens += r.prompt_tokens;
                    t.billable_completion_tokens += r.completion_tokens;
                    t.gpu_seconds += r.seconds;
                }
                Source::Cache => t.cache_hits += 1,
                Source::Mock => t.mock_calls += 1,
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = LedgerFile {
            records: self.records(),
        };
        fs::write(path, serde_json::to_string_pretty(&file).expect("ledger serializes"))
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: LedgerFile = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::from_records(file.records))
    }
}

/// USD price of one model, either per 1K tokens or per second of GPU time
/// (for locally served models).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Price {
    Tokens {
        prompt_per_1k: f64,
        completion_per_1k: f64,
    },
    GpuTime {
        gpu_second: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    #[serde(default)]
    pub models: BTreeMap<String, Price>,
}

impl PriceTable {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub totals: ModelTotals,
    /// `None` when the model has no entry in the price table.
    pub cost_usd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Sum over priced rows.
    pub total_usd: f64,
    pub unpriced: Vec<String>,
}

pub fn cost_report(ledger: &UsageLedger, prices: &PriceTable) -> CostReport {
    let records = ledger.records();
    let mut costs: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &records {
        if let Some(p) = prices.models.get(&r.model) {
            *costs.entry(r.model.as_str()).or_default() += r.cost(p);
        }
    }
    let mut rows = Vec::new();
    let mut unpriced = Vec::new();
    let mut total = 0.0;
    for (model, totals) in ledger.totals() {
        let cost = prices
            .models
            .contains_key(&model)
            .then(|| costs.get(model.as_str()).copied().unwrap_or(0.0));
        match cost {
            Some(c) => total += c,
            None => unpriced.push(model.clone()),
        }
        rows.push(CostRow {
            model,
            totals,
            cost_usd: cost,
        });
    }
    CostReport {
        rows,
        total_usd: total,
        unpriced,
    }
}

impl CostReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>7} {:>7} {:>7} {:>12} {:>12} {:>10} {:>10}",
            "model", "calls", "remote", "cached", "prompt_tok", "compl_tok", "gpu_s", "cost($)"
        );
        for r in &self.rows {
            let cost = r
                .cost_usd
                .map(|c| format!("{c:.3}"))
                .unwrap_or_else(|| "unpriced".to_string());
            let _ = writeln!(
                out,
                "{:<28} {:>7} {:>7} {:>7} {:>12} {:>12} {:>10.1} {:>10}",
                r.model,
                r.totals.calls,
                r.totals.remote_calls,
                r.totals.cache_hits,
                r.totals.prompt_tokens,
                r.totals.completion_tokens,
                r.totals.gpu_seconds,
                cost
            );
        }
        let _ = writeln!(out, "total priced cost: ${:.3}", self.total_usd);
        let _ = writeln!(out, "{}", self.comparison_row());
        out
    }

    /// One-line side-by-side comparison, e.g. `Cost ($) | a 0.294 | b 0.060`.
    pub fn comparison_row(&self) -> String {
        let mut line = String::from("Cost ($)");
        for r in &self.rows {
            match r.cost_usd {
                Some(c) => {
                    let _ = write!(line, " | {} {c:.3}", r.model);
                }
                None => {
                    let _ = write!(line, " | {} unpriced", r.model);
                }
            }
        }
        line
    }
}
