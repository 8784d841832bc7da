//! JSON problem documents (schema version `v1`).
//!
//! Top-level keys: `version?, n?, m?, D?, A, B, C, sigma2, Q?, R?, x0?,
//! u_init?, horizon?, trials?, seed?, noise_model?, loss_prob?, tolerances?`.
//! Instead of `B/C/sigma2` a document may carry either `wncs` (plant input
//! matrix plus network paths) or `restricted` (`C0, Bbar, Cbar, sigma0_2,
//! sigmaD_2`, with `D` at top level). Matrices are row-major nested arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use super::{wncs_to_model, MultiDelaySystem, RestrictedSystem, WncsDescription, WncsPath};
use crate::error::{Error, Result};
use crate::numerics::{is_positive_definite, ToleranceSet};
use crate::serde_rows::{from_rows, to_rows};

pub const SCHEMA_VERSION: &str = "v1";

/// Distribution used when sampling the multiplicative noises.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    Gaussian,
    TwoPoint,
    BernoulliLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub system: MultiDelaySystem,
    /// Present when the document used the restricted single-delay form.
    pub restricted: Option<RestrictedSystem>,
    /// Loss probability per delay index, for `bernoulli_loss` sampling.
    pub loss_probs: Vec<Option<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    /// `u_{-1}, …, u_{-D}`.
    pub u_init: Vec<DVector<f64>>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub noise_model: NoiseModel,
    pub tolerances: ToleranceSet,
}

impl ProblemSpec {
    /// Spec with default weights and simulation settings for `system`.
    pub fn for_system(system: MultiDelaySystem) -> Self {
        let (n, m, d) = (system.n(), system.m(), system.delay());
        Self {
            loss_probs: vec![None; d + 1],
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
            x0: DVector::from_element(n, 1.0),
            u_init: vec![DVector::zeros(m); d],
            horizon: 100,
            trials: 1000,
            seed: 0,
            noise_model: NoiseModel::Gaussian,
            tolerances: ToleranceSet::default(),
            restricted: None,
            system,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RestrictedDoc {
    #[serde(rename = "C0")]
    c0: Vec<Vec<f64>>,
    #[serde(rename = "Bbar")]
    bbar: Vec<Vec<f64>>,
    #[serde(rename = "Cbar")]
    cbar: Vec<Vec<f64>>,
    sigma0_2: f64,
    #[serde(rename = "sigmaD_2")]
    sigma_d_2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WncsDoc {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    paths: Vec<WncsPath>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    #[serde(rename = "A", skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    c: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wncs: Option<WncsDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    restricted: Option<RestrictedDoc>,
    #[serde(rename = "Q", skip_serializing_if = "Option::is_none")]
    q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u_init: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_model: Option<NoiseModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_prob: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tolerances: Option<ToleranceSet>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn matrix(name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let m = from_rows(rows, Some(shape.1)).map_err(|e| schema(format!("{name}: {e}")))?;
    if m.shape() != shape {
        return Err(schema(format!(
            "{name} must be {}x{}, got {}x{}",
            shape.0,
            shape.1,
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

fn input_cols(list: &[Vec<Vec<f64>>]) -> Option<usize> {
    list.iter().find_map(|rows| rows.first().map(Vec::len))
}

/// Parses a problem document, filling documented defaults.
pub fn load_spec(document: &[u8]) -> Result<ProblemSpec> {
    let doc: ProblemDocument = serde_json::from_slice(document).map_err(|e| match e.classify() {
        Category::Data => schema(e.to_string()),
        _ => Error::Parse { line: e.line(), column: e.column(), message: e.to_string() },
    })?;
    if let Some(v) = &doc.version {
        if v != SCHEMA_VERSION {
            return Err(schema(format!("unsupported version {v:?}, expected {SCHEMA_VERSION:?}")));
        }
    }

    let a_rows = doc.a.as_ref().ok_or_else(|| schema("missing field A"))?;
    let n = doc.n.unwrap_or(a_rows.len());
    if n == 0 {
        return Err(schema("n must be positive"));
    }
    let a = matrix("A", a_rows, (n, n))?;

    let explicit = doc.b.is_some() || doc.c.is_some() || doc.sigma2.is_some();
    let forms = [explicit, doc.wncs.is_some(), doc.restricted.is_some()];
    match forms.iter().filter(|f| **f).count() {
        0 => return Err(schema("missing field B (or wncs / restricted)")),
        1 => {}
        _ => return Err(schema("B/C/sigma2, wncs and restricted are mutually exclusive")),
    }

    let mut restricted = None;
    let mut loss_probs = None;
    let system = if let Some(w) = &doc.wncs {
        let m = doc.m.or_else(|| w.b.first().map(Vec::len)).unwrap_or(0);
        let b_plant = matrix("wncs.B", &w.b, (n, m))?;
        let desc = WncsDescription { a: a.clone(), b_plant, paths: w.paths.clone() };
        let sys = wncs_to_model(&desc).map_err(|e| schema(format!("wncs: {e}")))?;
        if let Some(d) = doc.d {
            if d != sys.delay() {
                return Err(schema(format!("D = {d} disagrees with the largest path delay {}", sys.delay())));
            }
        }
        loss_probs = Some(desc.loss_probabilities()?);
        sys
    } else if let Some(rd) = &doc.restricted {
        let d = doc.d.ok_or_else(|| schema("restricted form needs D"))?;
        let m = doc.m.or_else(|| rd.bbar.first().map(Vec::len)).unwrap_or(0);
        let r = RestrictedSystem {
            a: a.clone(),
            c0: matrix("restricted.C0", &rd.c0, (n, m))?,
            bbar: matrix("restricted.Bbar", &rd.bbar, (n, m))?,
            cbar: matrix("restricted.Cbar", &rd.cbar, (n, m))?,
            delay: d,
            sigma0_2: rd.sigma0_2,
            sigma_d_2: rd.sigma_d_2,
        };
        let sys = r.to_multi_delay().map_err(|e| schema(e.to_string()))?;
        restricted = Some(r);
        sys
    } else {
        let b = doc.b.as_ref().ok_or_else(|| schema("missing field B"))?;
        let c = doc.c.as_ref().ok_or_else(|| schema("missing field C"))?;
        let sigma2 = doc.sigma2.clone().ok_or_else(|| schema("missing field sigma2"))?;
        let d = match doc.d {
            Some(d) => d,
            None if b.is_empty() => return Err(schema("B must hold at least B_0")),
            None => b.len() - 1,
        };
        for (name, len) in [("B", b.len()), ("C", c.len()), ("sigma2", sigma2.len())] {
            if len != d + 1 {
                return Err(schema(format!("{name} length must be D+1 (= {}), got {len}", d + 1)));
            }
        }
        let m = doc.m.or_else(|| input_cols(b)).unwrap_or(0);
        if m == 0 {
            return Err(schema("m must be positive"));
        }
        let bm = b.iter().enumerate().map(|(i, r)| matrix(&format!("B[{i}]"), r, (n, m))).collect::<Result<Vec<_>>>()?;
        let cm = c.iter().enumerate().map(|(i, r)| matrix(&format!("C[{i}]"), r, (n, m))).collect::<Result<Vec<_>>>()?;
        MultiDelaySystem::new(a, bm, cm, sigma2)
    };

    let (n, m, d) = (system.n(), system.m(), system.delay());
    if let Some(want) = doc.m {
        if want != m {
            return Err(schema(format!("m = {want} disagrees with input matrices ({m} columns)")));
        }
    }
    let mut spec = ProblemSpec::for_system(system);
    spec.restricted = restricted;
    if let Some(lp) = loss_probs.or(doc.loss_prob) {
        if lp.len() != d + 1 {
            return Err(schema(format!("loss_prob length must be D+1 (= {}), got {}", d + 1, lp.len())));
        }
        if lp.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(schema("loss_prob entries must lie in [0, 1]"));
        }
        spec.loss_probs = lp;
    }
    if let Some(t) = doc.tolerances {
        let bad = t.violations();
        if !bad.is_empty() {
            return Err(schema(bad.join("; ")));
        }
        spec.tolerances = t;
    }
    if let Some(q) = &doc.q {
        spec.q = matrix("Q", q, (n, n))?;
    }
    if let Some(r) = &doc.r {
        spec.r = matrix("R", r, (m, m))?;
    }
    for (name, w) in [("Q", &spec.q), ("R", &spec.r)] {
        let asym = (w - w.transpose()).norm();
        if asym > 1e-12 * w.norm().max(1.0) || !is_positive_definite(w, spec.tolerances.pd_tol).0 {
            return Err(schema(format!("{name} must be symmetric positive definite")));
        }
    }
    if let Some(x0) = &doc.x0 {
        if x0.len() != n {
            return Err(schema(format!("x0 must have length n = {n}, got {}", x0.len())));
        }
        spec.x0 = DVector::from_vec(x0.clone());
    }
    if let Some(u) = &doc.u_init {
        if u.len() != d {
            return Err(schema(format!("u_init must hold D = {d} vectors, got {}", u.len())));
        }
        if let Some(bad) = u.iter().position(|v| v.len() != m) {
            return Err(schema(format!("u_init[{bad}] must have length m = {m}")));
        }
        spec.u_init = u.iter().map(|v| DVector::from_vec(v.clone())).collect();
    }
    if let Some(h) = doc.horizon {
        if h == 0 {
            return Err(schema("horizon must be positive"));
        }
        spec.horizon = h;
    }
    if let Some(t) = doc.trials {
        if t == 0 {
            return Err(schema("trials must be positive"));
        }
        spec.trials = t;
    }
    if let Some(s) = doc.seed {
        spec.seed = s;
    }
    if let Some(nm) = doc.noise_model {
        spec.noise_model = nm;
    }
    Ok(spec)
}

/// Writes a spec back as a `v1` document that `load_spec` maps to the same spec.
pub fn serialize_spec(spec: &ProblemSpec) -> String {
    let sys = &spec.system;
    let mut doc = ProblemDocument {
        version: Some(SCHEMA_VERSION.to_string()),
        n: Some(sys.n()),
        m: Some(sys.m()),
        d: Some(sys.delay()),
        a: Some(to_rows(&sys.a)),
        q: Some(to_rows(&spec.q)),
        r: Some(to_rows(&spec.r)),
        x0: Some(spec.x0.as_slice().to_vec()),
        u_init: Some(spec.u_init.iter().map(|v| v.as_slice().to_vec()).collect()),
        horizon: Some(spec.horizon),
        trials: Some(spec.trials),
        seed: Some(spec.seed),
        noise_model: Some(spec.noise_model),
        tolerances: Some(spec.tolerances),
        ..Default::default()
    };
    if let Some(r) = &spec.restricted {
        doc.restricted = Some(RestrictedDoc {
            c0: to_rows(&r.c0),
            bbar: to_rows(&r.bbar),
            cbar: to_rows(&r.cbar),
            sigma0_2: r.sigma0_2,
            sigma_d_2: r.sigma_d_2,
        });
    } else {
        doc.b = Some(sys.b.iter().map(to_rows).collect());
        doc.c = Some(sys.c.iter().map(to_rows).collect());
        doc.sigma2 = Some(sys.sigma2.clone());
    }
    if spec.loss_probs.iter().any(Option::is_some) {
        doc.loss_prob = Some(spec.loss_probs.clone());
    }
    serde_json::to_string_pretty(&doc).expect("problem document serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"A": [[1.0, 2.0], [0.0, 3.0]], "B": [[[1.0], [0.0]]], "C": [[[0.0], [1.0]]], "sigma2": [0.5]}"#;

    #[test]
    fn minimal_document_gets_identity_weights() {
        let spec = load_spec(MINIMAL.as_bytes()).unwrap();
        assert_eq!(spec.q, DMatrix::identity(2, 2));
        assert_eq!(spec.r, DMatrix::identity(1, 1));
        assert_eq!(spec.system.delay(), 0);
        assert_eq!(spec.tolerances, ToleranceSet::default());
        assert!(spec.u_init.is_empty());
    }

    #[test]
    fn wrong_b_length_is_schema_error() {
        let doc = r#"{"D": 1, "A": [[2.0]], "B": [[[1.0]]], "C": [[[1.0]], [[1.0]]], "sigma2": [0.1, 0.1]}"#;
        match load_spec(doc.as_bytes()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("B length must be D+1"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        match load_spec(b"{\"A\": [[1.0]],\n  \"B\": [") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mistyped_field_is_schema_error() {
        let doc = r#"{"A": "not a matrix", "B": [[[1.0]]], "C": [[[1.0]]], "sigma2": [0.1]}"#;
        assert!(matches!(load_spec(doc.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn unknown_field_is_schema_error() {
        let doc = r#"{"A": [[1.0]], "B": [[[1.0]]], "C": [[[1.0]]], "sigma2": [0.1], "Qq": 1}"#;
        assert!(matches!(load_spec(doc.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn exclusive_forms() {
        let doc = r#"{"A": [[1.0]], "B": [[[1.0]]], "C": [[[1.0]]], "sigma2": [0.1],
                      "wncs": {"B": [[1.0]], "paths": [{"delay": 0, "loss_prob": 0.1}]}}"#;
        assert!(matches!(load_spec(doc.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn wncs_document_converted() {
        let doc = r#"{"A": [[1.3]], "wncs": {"B": [[1.0]], "paths": [{"delay": 0, "loss_prob": 0.2}, {"delay": 2, "loss_prob": 0.5}]}}"#;
        let spec = load_spec(doc.as_bytes()).unwrap();
        assert_eq!(spec.system.delay(), 2);
        assert_eq!(spec.loss_probs, vec![Some(0.2), None, Some(0.5)]);
        assert_eq!(spec.u_init.len(), 2);
    }

    #[test]
    fn non_pd_weight_rejected() {
        let doc = r#"{"A": [[1.0]], "B": [[[1.0]]], "C": [[[1.0]]], "sigma2": [0.1], "R": [[0.0]]}"#;
        assert!(matches!(load_spec(doc.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn serialize_round_trip_minimal() {
        let spec = load_spec(MINIMAL.as_bytes()).unwrap();
        let again = load_spec(serialize_spec(&spec).as_bytes()).unwrap();
        assert_eq!(spec, again);
    }
}
