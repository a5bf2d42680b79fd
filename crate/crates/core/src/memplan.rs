//! Activation-memory accounting under fusion, quantization and compression.
//!
//! A map that leaves its fusion step is stored in full:
//! `⌈N·C·H·W·bits / 8⌉` bytes. A map that lives inside a step costs only
//! its ring buffer, reported separately. Report rows group edges by their
//! `row` label; when any edge is labelled, table totals cover labelled
//! edges only. KB means 1024 bytes.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::nn::fusion::{analyze, EdgeClass, FusionPlan, StepUsage};
use crate::nn::graph::NetworkGraph;
use crate::nn::transform::{insert_compression, CompressionConfig};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeReport {
    pub name: String,
    pub row: Option<String>,
    pub shape: Shape,
    pub bits: u32,
    pub class: &'static str,
    pub stored: bool,
    /// Full size when stored, ring-buffer size when fused, 0 for aliases.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub edges: Vec<EdgeReport>,
    pub input_bytes: u64,
    /// All materialised maps except the input.
    pub stored_bytes: u64,
    pub buffer_bytes: u64,
    /// Table total: labelled stored maps, or all stored maps if unlabelled.
    pub total_bytes: u64,
    pub rows: Vec<(String, u64)>,
    pub steps: Vec<StepUsage>,
    pub peak_bytes: u64,
}

/// Rounds `bytes / 1024` to one decimal, ties away from zero.
pub fn kb(bytes: u64) -> f64 {
    (bytes as f64 / 1024.0 * 10.0).round() / 10.0
}

pub fn format_kb(bytes: u64) -> String {
    format!("{:.1}", kb(bytes))
}

pub fn mb(bytes: u64) -> f64 {
    (bytes as f64 / (1024.0 * 1024.0) * 10.0).round() / 10.0
}

/// Plans memory for one sample, optionally after inserting compression.
pub fn plan_memory(graph: &NetworkGraph, plan: &FusionPlan, compression: Option<&CompressionConfig>) -> Result<MemoryReport> {
    let (graph, plan) = match compression {
        Some(cfg) => {
            let (g, p, _) = insert_compression(graph, plan, cfg)?;
            (g, p)
        }
        None => (graph.clone(), plan.clone()),
    };
    let info = graph.validate()?;
    let sp = analyze(&graph, &info, &plan)?;

    let mut edges = Vec::with_capacity(info.edges.len());
    let mut stored_bytes = 0;
    let mut buffer_bytes = 0;
    let mut input_bytes = 0;
    let labelled = info.edges.iter().any(|e| e.row.is_some());
    let mut labelled_total = 0;
    let mut rows: Vec<(String, u64)> = Vec::new();
    for (e, edge) in info.edges.iter().enumerate() {
        let full = edge.bytes(1);
        let (class, stored, bytes) = match sp.class[e] {
            EdgeClass::Input => ("input", true, full),
            EdgeClass::Stored => ("stored", true, full),
            EdgeClass::Intra { .. } => ("fused", false, sp.buffer_bytes(&info, e)),
            EdgeClass::Alias => ("alias", false, 0),
        };
        match sp.class[e] {
            EdgeClass::Input => input_bytes = full,
            EdgeClass::Stored => stored_bytes += full,
            EdgeClass::Intra { .. } => buffer_bytes += bytes,
            EdgeClass::Alias => {}
        }
        if let Some(r) = &edge.row {
            let add = if sp.class[e] == EdgeClass::Stored { full } else { 0 };
            labelled_total += add;
            match rows.iter_mut().find(|(n, _)| n == r) {
                Some(slot) => slot.1 += add,
                None => rows.push((r.clone(), add)),
            }
        }
        edges.push(EdgeReport {
            name: edge.name.clone(),
            row: edge.row.clone(),
            shape: edge.shape,
            bits: edge.bits,
            class,
            stored,
            bytes,
        });
    }

    let mut steps = Vec::with_capacity(sp.steps.len());
    let mut peak = 0;
    for (t, step) in sp.steps.iter().enumerate() {
        let live: u64 = (0..info.edges.len())
            .filter(|&e| sp.live_at(e, t))
            .map(|e| info.edges[e].bytes(1))
            .sum();
        let buf: u64 = step
            .layers
            .iter()
            .map(|&li| sp.buffer_bytes(&info, info.layer_output[li]))
            .sum();
        let u = StepUsage {
            name: step.name.clone(),
            stored_live_bytes: live,
            buffer_bytes: buf,
        };
        peak = peak.max(u.total());
        steps.push(u);
    }

    Ok(MemoryReport {
        edges,
        input_bytes,
        stored_bytes,
        buffer_bytes,
        total_bytes: if labelled { labelled_total } else { stored_bytes },
        rows,
        steps,
        peak_bytes: peak,
    })
}

impl MemoryReport {
    /// Ratio of `base`'s table total to this one.
    pub fn factor_vs(&self, base: &MemoryReport) -> f64 {
        base.total_bytes as f64 / self.total_bytes as f64
    }

    pub fn row(&self, name: &str) -> Option<u64> {
        self.rows.iter().find(|(n, _)| n == name).map(|r| r.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("edge,row,n,c,h,w,bits,class,bytes,kb\n");
        for e in &self.edges {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.name,
                e.row.as_deref().unwrap_or(""),
                e.shape.n,
                e.shape.c,
                e.shape.h,
                e.shape.w,
                e.bits,
                e.class,
                e.bytes,
                format_kb(e.bytes)
            );
        }
        s
    }
}

/// Parameter storage in bytes at `bits` per weight and bias.
pub fn weight_size(graph: &NetworkGraph, bits: u32) -> Result<u64> {
    let count: u64 = graph
        .param_shapes()?
        .iter()
        .map(|(_, w, b)| (w.numel() + b) as u64)
        .sum();
    Ok((count * bits as u64).div_ceil(8))
}

/// Several configurations of one network side by side.
#[derive(Clone, Debug)]
pub struct MemoryTable {
    pub title: String,
    pub columns: Vec<(String, MemoryReport)>,
}

impl MemoryTable {
    fn row_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (_, r) in &self.columns {
            for (n, _) in &r.rows {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        names
    }

    fn factor(&self, i: usize) -> String {
        let f = self.columns[i].1.factor_vs(&self.columns[0].1);
        if (f - f.round()).abs() < 1e-9 {
            format!("{}", f.round() as u64)
        } else {
            format!("{f:.1}")
        }
    }

    fn cell(r: &MemoryReport, row: &str) -> String {
        match r.row(row) {
            Some(b) if b > 0 => format_kb(b),
            _ => "-".into(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["Layer".to_string()];
        head.extend(self.columns.iter().map(|(n, _)| n.clone()));
        lines.push(head);
        let mut input = vec!["Input (KB)".to_string()];
        input.extend(self.columns.iter().map(|(_, r)| format_kb(r.input_bytes)));
        lines.push(input);
        for row in self.row_names() {
            let mut l = vec![row.clone()];
            l.extend(self.columns.iter().map(|(_, r)| Self::cell(r, &row)));
            lines.push(l);
        }
        let mut total = vec!["Total (KB)".to_string()];
        total.extend(self.columns.iter().map(|(_, r)| format_kb(r.total_bytes)));
        lines.push(total);
        let mut factor = vec!["Compression".to_string()];
        factor.extend((0..self.columns.len()).map(|i| format!("{}x", self.factor(i))));
        lines.push(factor);
        let mut peak = vec!["Peak live (KB)".to_string()];
        peak.extend(self.columns.iter().map(|(_, r)| format_kb(r.peak_bytes)));
        lines.push(peak);

        let ncol = lines[0].len();
        let widths: Vec<usize> = (0..ncol).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n", self.title);
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{:<w$}", v, w = widths[c]) } else { format!("{:>w$}", v, w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for (n, _) in &self.columns {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        let mut push = |label: &str, vals: Vec<String>| {
            s.push_str(label);
            for v in vals {
                s.push(',');
                s.push_str(&v);
            }
            s.push('\n');
        };
        push("input_kb", self.columns.iter().map(|(_, r)| format_kb(r.input_bytes)).collect());
        for row in self.row_names() {
            push(&row, self.columns.iter().map(|(_, r)| Self::cell(r, &row)).collect());
        }
        push("total_kb", self.columns.iter().map(|(_, r)| format_kb(r.total_bytes)).collect());
        push("factor", (0..self.columns.len()).map(|i| self.factor(i)).collect());
        push("peak_kb", self.columns.iter().map(|(_, r)| format_kb(r.peak_bytes)).collect());
        s
    }
}
