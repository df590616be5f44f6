use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FedError;

pub const HISTORY_HEADER: &str = "round,client_id,loss,rouge1,rouge2,rougeL,bleu4,uplink_bytes,downlink_bytes";
pub const GLOBAL_ID: &str = "global";

/// One evaluation point: the aggregated model (`client_id == "global"`) or a
/// client's local model after that round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub client_id: String,
    pub loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu4: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

impl HistoryRow {
    pub fn is_global(&self) -> bool {
        self.client_id == GLOBAL_ID
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub rows: Vec<HistoryRow>,
}

impl RunHistory {
    pub fn global_rows(&self) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(|r| r.is_global())
    }

    pub fn global_loss(&self, round: usize) -> Option<f64> {
        self.global_rows().find(|r| r.round == round).map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv write");
        }
        if self.rows.is_empty() {
            return format!("{HISTORY_HEADER}\n");
        }
        String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, FedError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != HISTORY_HEADER {
            return Err(FedError::InvalidConfig(format!("unexpected history header `{header}`")));
        }
        let rows = r.deserialize().collect::<Result<Vec<HistoryRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), FedError> {
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, self.to_csv())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FedError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
