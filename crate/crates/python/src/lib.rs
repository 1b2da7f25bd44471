// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings. Positions travel as FEN strings and moves as UCI.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use lookahead_lab_core::chess::{parse_fen, parse_uci, perft, Move, Position, Square};
use lookahead_lab_core::corruption::{self, CorruptionThresholds};
use lookahead_lab_core::fixtures;
use lookahead_lab_core::interventions::{self, PatchResult};
use lookahead_lab_core::model::weights::{load_weights, save_weights};
use lookahead_lab_core::model::{
    make_planted_model, make_toy_model, ModelConfig, ModelError, PlantSpec, PolicyModel, Transformer,
};
use lookahead_lab_core::puzzle::Puzzle;
use lookahead_lab_core::selftest::{run_selftest, SelftestConfig};
use lookahead_lab_core::setlabel::{self, SetLabel};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn fen(text: &str) -> PyResult<Position> {
    parse_fen(text).map_err(value_err)
}

fn uci(text: &str) -> PyResult<Move> {
    parse_uci(text).map_err(value_err)
}

fn square(name: &str) -> PyResult<Square> {
    name.parse().map_err(value_err)
}

#[pyclass(name = "Position", module = "lookahead_lab", frozen)]
struct PyPosition {
    inner: Position,
}

#[pymethods]
impl PyPosition {
    /// Parses a FEN string; the standard start position when omitted.
    #[new]
    #[pyo3(signature = (fen_text=None))]
    fn new(fen_text: Option<&str>) -> PyResult<Self> {
        let inner = match fen_text {
            Some(t) => fen(t)?,
            None => Position::startpos(),
        };
        Ok(PyPosition { inner })
    }

    fn fen(&self) -> String {
        self.inner.to_fen()
    }

    fn legal_moves(&self) -> Vec<String> {
        self.inner.legal_moves().into_iter().map(Move::to_uci).collect()
    }

    fn apply(&self, mv: &str) -> PyResult<Self> {
        let inner = self.inner.apply_move(uci(mv)?).map_err(value_err)?;
        Ok(PyPosition { inner })
    }

    fn in_check(&self) -> bool {
        self.inner.in_check()
    }

    fn is_checkmate(&self) -> bool {
        self.inner.is_checkmate()
    }

    fn perft(&self, depth: u32) -> u64 {
        perft(&self.inner, depth)
    }

    fn __repr__(&self) -> String {
        format!("Position('{}')", self.inner.to_fen())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "Model", module = "lookahead_lab", frozen)]
struct PyModel {
    inner: Transformer,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed, layers=4, heads=4, d_model=64, d_ff=128))]
    fn toy(seed: u64, layers: usize, heads: usize, d_model: usize, d_ff: usize) -> PyResult<Self> {
        let cfg = ModelConfig::new(layers, heads, d_model, d_ff);
        Ok(PyModel { inner: make_toy_model(cfg, seed).map_err(model_err)? })
    }

    /// A model with a hand-wired look-ahead head at `(plant_layer, plant_head)`.
    #[staticmethod]
    #[pyo3(signature = (seed, layers=4, heads=4, d_model=64, d_ff=128, plant_layer=1, plant_head=2))]
    fn planted(
        seed: u64,
        layers: usize,
        heads: usize,
        d_model: usize,
        d_ff: usize,
        plant_layer: usize,
        plant_head: usize,
    ) -> PyResult<Self> {
        let cfg = ModelConfig::new(layers, heads, d_model, d_ff);
        let plant = PlantSpec::at(plant_layer, plant_head);
        Ok(PyModel { inner: make_planted_model(cfg, plant, seed).map_err(model_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: load_weights(path).map_err(model_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_weights(&self.inner, path).map_err(model_err)
    }

    /// `(layers, heads, d_model, d_ff)`.
    fn config(&self) -> (usize, usize, usize, usize) {
        let c = self.inner.config();
        (c.layers, c.heads, c.d_model, c.d_ff)
    }

    /// Planted `(layer, head)`, if any.
    fn plant(&self) -> Option<(usize, usize)> {
        self.inner.plant().map(|p| (p.layer, p.head))
    }

    /// Move probabilities keyed by UCI, and the value.
    fn evaluate(&self, position: &PyPosition) -> PyResult<(BTreeMap<String, f64>, f64)> {
        let out = self.inner.evaluate(&position.inner).map_err(model_err)?;
        Ok((out.iter().map(|(m, p)| (m.to_uci(), p)).collect(), out.value))
    }
}

/// `(kind, layer, index, role, reduction)`.
type Row = (String, usize, usize, String, f64);

fn rows(results: Vec<PatchResult>) -> Vec<Row> {
    results
        .into_iter()
        .map(|r| {
            let role = r.role.map(|x| x.to_string()).unwrap_or_default();
            (r.site.kind.as_str().to_string(), r.site.layer, r.site.index, role, r.reduction)
        })
        .collect()
}

fn puzzle(start: &PyPosition, pv: Vec<String>) -> PyResult<Puzzle> {
    let moves = pv.iter().map(|m| uci(m)).collect::<PyResult<Vec<_>>>()?;
    Puzzle::new("py", start.inner.clone(), moves, 0, vec![]).map_err(value_err)
}

/// Residual sweep as `(kind, layer, square, role, reduction)` rows.
#[pyfunction]
fn sweep_residual(model: &PyModel, start: &PyPosition, pv: Vec<String>, corrupted: &PyPosition) -> PyResult<Vec<Row>> {
    let pz = puzzle(start, pv)?;
    Ok(rows(interventions::sweep_residual(&model.inner, &pz, &corrupted.inner).map_err(value_err)?))
}

/// Head sweep as `(kind, layer, head, role, reduction)` rows.
#[pyfunction]
fn sweep_heads(model: &PyModel, start: &PyPosition, pv: Vec<String>, corrupted: &PyPosition) -> PyResult<Vec<Row>> {
    let pz = puzzle(start, pv)?;
    Ok(rows(interventions::sweep_heads(&model.inner, &pz, &corrupted.inner).map_err(value_err)?))
}

/// Reduction of `target` when attention entry `(query, key)` of one head is zeroed.
#[pyfunction]
fn ablate_entry(
    model: &PyModel,
    position: &PyPosition,
    layer: usize,
    head: usize,
    target: &str,
    query: &str,
    key: &str,
) -> PyResult<f64> {
    let entries = [(square(query)?, square(key)?)];
    let out = interventions::ablate_entries(&model.inner, &position.inner, layer, head, uci(target)?, &entries)
        .map_err(value_err)?;
    Ok(out[0])
}

#[pyfunction]
fn classify(destinations: Vec<String>) -> PyResult<String> {
    let squares = destinations.iter().map(|s| square(s)).collect::<PyResult<Vec<_>>>()?;
    Ok(setlabel::classify(&squares).map_err(value_err)?.to_string())
}

#[pyfunction]
fn pattern_match(label: &str, pattern: &str) -> PyResult<bool> {
    let label: SetLabel = label.parse().map_err(value_err)?;
    let pattern = setlabel::parse_pattern(pattern).map_err(value_err)?;
    Ok(setlabel::pattern_match(&label, &pattern))
}

#[pyfunction]
fn js_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("distributions must have equal length"));
    }
    Ok(corruption::js_divergence(&p, &q))
}

/// `(corrupted_fen, kind, squares, jsd)`.
type Corruption = (String, String, Vec<String>, f64);

/// Lowest-divergence corruption passing every filter, or `None`.
#[pyfunction]
fn select_corruption(
    original: &PyPosition,
    best: &str,
    strong: &PyModel,
    weak: &PyModel,
) -> PyResult<Option<Corruption>> {
    let th = CorruptionThresholds::default();
    let found = corruption::select_corruption(&original.inner, uci(best)?, &strong.inner, &weak.inner, &th)
        .map_err(value_err)?;
    Ok(found.map(|s| {
        let squares = s.candidate.edit.squares.iter().map(|q| q.name()).collect();
        (s.candidate.position.to_fen(), s.candidate.edit.kind.to_string(), squares, s.jsd)
    }))
}

/// Fixtures for the default plant as `(start, pv, corrupted, source, target)`.
#[pyfunction]
fn plant_fixtures(count: usize, seed: u64) -> Vec<(PyPosition, Vec<String>, PyPosition, String, String)> {
    fixtures::plant_fixtures(&PlantSpec::default(), count, seed)
        .into_iter()
        .map(|f| {
            let pv = f.puzzle.pv.iter().map(|m| m.to_uci()).collect();
            (
                PyPosition { inner: f.puzzle.start },
                pv,
                PyPosition { inner: f.corrupted },
                f.source.name(),
                f.target.name(),
            )
        })
        .collect()
}

/// Runs the planted-model battery; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (seed=7, fixtures=12, probe_fixtures=1000))]
fn plant_selftest(py: Python<'_>, seed: u64, fixtures: usize, probe_fixtures: usize) -> PyResult<(bool, String)> {
    let mut cfg = SelftestConfig::new(seed);
    cfg.fixtures = fixtures;
    cfg.probe_fixtures = probe_fixtures;
    let report = py.detach(|| run_selftest(&cfg)).map_err(value_err)?;
    Ok((report.passed(), report.table()))
}

#[pymodule]
pub fn lookahead_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPosition>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sweep_residual, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_heads, m)?)?;
    m.add_function(wrap_pyfunction!(ablate_entry, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_match, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(select_corruption, m)?)?;
    m.add_function(wrap_pyfunction!(plant_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(plant_selftest, m)?)?;
    Ok(())
}
