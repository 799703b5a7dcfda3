//! Per-batch metrics records and the run summary.

use std::io::Write;

use serde::Serialize;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BatchRecord {
    pub batch_id: u64,
    pub node: u32,
    pub round: u64,
    pub examples: usize,
    pub working_set: usize,
    pub ingest_ms: f64,
    pub prepare_ms: f64,
    pub train_ms: f64,
    pub collect_ms: f64,
    /// Time since the run started at which collect finished this batch.
    pub finished_ms: f64,
    pub train_loss: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub hit_rate: Option<f64>,
    pub remote_keys: usize,
    pub ssd_file_reads: u64,
    pub ssd_bytes_read: u64,
    pub ssd_files_written: u64,
    pub ssd_bytes_written: u64,
    pub compactions: u64,
    pub sync_rounds: u64,
}

const CSV_HEADER: &str = "batch_id,node,round,examples,working_set,ingest_ms,prepare_ms,train_ms,collect_ms,finished_ms,\
train_loss,cache_hits,cache_misses,hit_rate,remote_keys,ssd_file_reads,ssd_bytes_read,ssd_files_written,\
ssd_bytes_written,compactions,sync_rounds";

impl BatchRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6},{},{},{},{},{},{},{},{},{},{}",
            self.batch_id,
            self.node,
            self.round,
            self.examples,
            self.working_set,
            self.ingest_ms,
            self.prepare_ms,
            self.train_ms,
            self.collect_ms,
            self.finished_ms,
            self.train_loss,
            self.cache_hits,
            self.cache_misses,
            self.hit_rate.map_or(String::new(), |h| format!("{h:.6}")),
            self.remote_keys,
            self.ssd_file_reads,
            self.ssd_bytes_read,
            self.ssd_files_written,
            self.ssd_bytes_written,
            self.compactions,
            self.sync_rounds,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub nodes: u32,
    pub devices: u32,
    pub batches: usize,
    pub examples: usize,
    pub wall_secs: f64,
    pub throughput_eps: f64,
    pub sync_collectives: u64,
    pub inter_node_rounds: usize,
    pub intra_node_rounds: usize,
    pub messages: u64,
    pub message_bytes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub lru_demotions: u64,
    pub lfu_evictions: u64,
    pub pinned_evictions: u64,
    pub ssd_file_reads: u64,
    pub ssd_bytes_read: u64,
    pub ssd_files_written: u64,
    pub ssd_bytes_written: u64,
    pub compactions: u64,
    pub queue_high_water: [usize; 3],
    pub queue_depths: [usize; 3],
    pub final_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub batches: Vec<BatchRecord>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for b in &self.batches {
            writeln!(w, "{}", b.csv_row())?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).unwrap()
    }

    /// Mean gap between consecutive batch completions, skipping the first
    /// `warmup` completions.
    pub fn steady_period_ms(&self, warmup: usize) -> Option<f64> {
        let mut done: Vec<f64> = self.batches.iter().map(|b| b.finished_ms).collect();
        done.sort_by(f64::total_cmp);
        let tail = done.get(warmup..)?;
        if tail.len() < 2 {
            return None;
        }
        Some((tail[tail.len() - 1] - tail[0]) / (tail.len() - 1) as f64)
    }

    /// Hit rate of each round, pooled over nodes, in round order.
    pub fn hit_rate_by_round(&self) -> Vec<Option<f64>> {
        let rounds = self.batches.iter().map(|b| b.round + 1).max().unwrap_or(0) as usize;
        let mut acc = vec![(0u64, 0u64); rounds];
        for b in &self.batches {
            acc[b.round as usize].0 += b.cache_hits;
            acc[b.round as usize].1 += b.cache_misses;
        }
        acc.into_iter().map(|(h, m)| (h + m > 0).then(|| h as f64 / (h + m) as f64)).collect()
    }
}
