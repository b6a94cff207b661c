//! Plain-text experiment reports: a fixed key-value header followed by
//! named CSV blocks. All floating-point output uses 17 significant digits
//! so reports and golden files reproduce bit-for-bit.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Result;
use crate::graph::MetricTree;

/// 17 significant digits, enough to round-trip any f64.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// FNV-1a fingerprint of the canonical network serialization, used to tie
/// a report to the exact graph it ran on.
pub fn graph_hash(tree: &MetricTree) -> String {
    let text = tree.serialize(&BTreeMap::new());
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// A CSV block inside a report.
#[derive(Debug, Clone)]
pub struct CsvBlock {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvBlock {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    /// Ordered key-value header; insertion order is preserved.
    pub header: Vec<(String, String)>,
    pub blocks: Vec<CsvBlock>,
}

impl Report {
    pub fn new(experiment: &str) -> Self {
        let mut r = Self::default();
        r.set("experiment", experiment);
        r.set("version", env!("CARGO_PKG_VERSION"));
        r
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn set_float(&mut self, key: &str, value: f64) {
        self.set(key, &format_float(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn block(&self, name: &str) -> Option<&CsvBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        for (k, v) in &self.header {
            writeln!(out, "{k}: {v}")?;
        }
        for block in &self.blocks {
            writeln!(out)?;
            writeln!(out, "[{}]", block.name)?;
            writeln!(out, "{}", block.header.join(","))?;
            for row in &block.rows {
                let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
                writeln!(out, "{}", cells.join(","))?;
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("reports are UTF-8")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::benchmark_tree;

    #[test]
    fn float_format_round_trips() {
        for &x in &[0.1, std::f64::consts::PI, 1.0 / 3.0, 6.02e23, -4.9e-324] {
            let s = format_float(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn graph_hash_is_stable_and_id_sensitive() {
        let g = benchmark_tree();
        assert_eq!(graph_hash(&g), graph_hash(&benchmark_tree()));
        let other = crate::graph::random_tree(7, 10);
        assert_ne!(graph_hash(&g), graph_hash(&other));
    }

    #[test]
    fn report_renders_header_then_blocks() {
        let mut r = Report::new("demo");
        r.set("seed", "42");
        let mut b = CsvBlock::new("runs", &["index", "value"]);
        b.push(vec![0.0, 1.5]);
        r.blocks.push(b);
        let text = r.render();
        assert!(text.starts_with("experiment: demo\nversion: "));
        assert!(text.contains("\n[runs]\nindex,value\n"));
    }
}
