//! Analytic parameter and multiply-accumulate profiling, and shape tracing.

use std::fmt::Write as _;

use drsi_tensor::{Ctx, Shape, Var};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::network::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub name: String,
    #[serde(serialize_with = "shape_field")]
    pub shape: Option<Shape>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub gmacs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub input_size: usize,
    pub rows: Vec<ProfileRow>,
    pub totals: Totals,
}

fn shape_text(s: &Option<Shape>) -> String {
    s.map(|s| format!("{}x{}x{}x{}", s.n, s.c, s.h, s.w)).unwrap_or_default()
}

fn shape_field<S: serde::Serializer>(s: &Option<Shape>, ser: S) -> std::result::Result<S::Ok, S::Error> {
    match s {
        Some(s) => ser.collect_seq([s.n, s.c, s.h, s.w]),
        None => ser.serialize_none(),
    }
}

/// Runs a symbolic forward of `model` on a (1, 3, size, size) input.
pub fn profile_model<T: drsi_tensor::Float>(model: &Model<T>, input_size: usize) -> Result<ProfileReport> {
    let mut cx = Ctx::<T>::symbolic();
    model.forward(&mut cx, &Var::symbolic(Shape::new(1, 3, input_size, input_size)))?;
    let rows: Vec<ProfileRow> = cx
        .into_probe()
        .into_rows()
        .into_iter()
        .map(|r| ProfileRow { name: r.name, shape: r.shape, params: r.params, macs: r.macs })
        .collect();
    let params = rows.iter().map(|r| r.params).sum();
    let macs = rows.iter().map(|r| r.macs).sum();
    Ok(ProfileReport { input_size, rows, totals: Totals { params, macs, gmacs: macs as f64 / 1e9 } })
}

pub fn profile(cfg: &ModelConfig, input_size: usize, seed: u64) -> Result<ProfileReport> {
    profile_model(&Model::<f32>::build(cfg, seed)?, input_size)
}

/// Every named value with its shape, in execution order.
pub fn trace(cfg: &ModelConfig, input_size: usize, seed: u64) -> Result<Vec<(String, Shape)>> {
    let report = profile(cfg, input_size, seed)?;
    Ok(report.rows.into_iter().filter_map(|r| r.shape.map(|s| (r.name, s))).collect())
}

impl ProfileReport {
    /// Rows ordered by parameter count, largest first.
    pub fn largest(&self, k: usize) -> Vec<&ProfileRow> {
        let mut rows: Vec<&ProfileRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| std::cmp::Reverse(r.params));
        rows.truncate(k);
        rows
    }

    /// Header, one line per row, and a final `total` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,shape,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.name, shape_text(&r.shape), r.params, r.macs);
        }
        let _ = writeln!(out, "total,,{},{}", self.totals.params, self.totals.macs);
        out
    }

    /// One JSON object per row, then one holding the totals.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("plain data"));
            out.push('\n');
        }
        let totals = serde_json::json!({ "input_size": self.input_size, "totals": self.totals });
        out.push_str(&totals.to_string());
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_column_sums_and_match_trainable_count() {
        let cfg = ModelConfig::miniature();
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        let r = profile_model(&model, 128).unwrap();
        assert_eq!(r.totals.params, model.count_trainable());
        assert_eq!(r.totals.macs, r.rows.iter().map(|r| r.macs).sum::<u64>());
        let csv = r.to_csv();
        let last = csv.lines().last().unwrap();
        assert_eq!(last, format!("total,,{},{}", r.totals.params, r.totals.macs));
        assert_eq!(r.to_json_lines().lines().count(), r.rows.len() + 1);
    }

    #[test]
    fn bad_size_is_an_error() {
        let model = Model::<f32>::build(&ModelConfig::miniature(), 0).unwrap();
        assert!(profile_model(&model, 100).is_err());
    }
}
