//! JSON files for instances, policies and certificates.
//!
//! Values attached to the tree are keyed by node id (builtin layout) or by
//! the id of the scenario's leaf node (relaxed layout), one map per stage.
//! The canonical form sorts object keys and writes every float with 17
//! significant digits, so parsing and re-serializing is byte-exact.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use crate::adapted::{AdaptedVector, Mode, PNorm};
use crate::causal::{CausalOperator, OperatorSpec};
use crate::error::{Error, Result};
use crate::objective::{Objective, ObjectiveSpec};
use crate::optimality::{CertificateMode, MultiplierCertificate};
use crate::problem::Problem;
use crate::recourse::RecourseInstance;
use crate::sets::{ConvexSet, DecomposableFamily};
use crate::tree::{ScenarioTree, TreeSpec};

/// Instance format understood by this version of the library.
pub const FORMAT_VERSION: u32 = 1;

/// Per-stage maps from node (or scenario leaf) id to a vector.
pub type StageValues = Vec<BTreeMap<String, Vec<f64>>>;

/// Set families keyed by node id; `"*"` covers every node not listed.
pub type SetFamilySpec = BTreeMap<String, ConvexSet>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConstants {
    /// Lipschitz constant of the objective.
    pub l_phi: f64,
    /// Node recourse constant.
    pub c: f64,
}

/// A serialized problem. `C_f` is declared with the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstanceFile {
    pub version: u32,
    pub tree: TreeSpec,
    pub operator: OperatorSpec,
    pub x_sets: SetFamilySpec,
    pub y_sets: SetFamilySpec,
    pub objective: ObjectiveSpec,
    pub constants: DeclaredConstants,
    #[serde(default)]
    pub p: PNorm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub mode: Mode,
    pub dim: usize,
    pub stages: StageValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub mode: CertificateMode,
    pub g: StageValues,
    pub psi: StageValues,
    pub n: StageValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<StageValues>,
}

/// A parsed and validated instance.
#[derive(Debug, Clone)]
pub struct LoadedInstance {
    pub problem: Problem,
    pub policy: Option<AdaptedVector>,
    pub certificate: Option<MultiplierCertificate>,
}

fn slot_key(tree: &ScenarioTree, mode: Mode, t: usize, k: usize) -> String {
    let node = match mode {
        Mode::Builtin => tree.stage_nodes(t)[k],
        Mode::Relaxed => tree.scenario_node(k),
    };
    tree.node_id(node).to_string()
}

/// Keyed form of an adapted vector.
pub fn stage_values(tree: &ScenarioTree, v: &AdaptedVector) -> StageValues {
    (0..tree.stages())
        .map(|t| {
            (0..v.slots(t))
                .map(|k| (slot_key(tree, v.mode(), t, k), v.slot(t, k).to_vec()))
                .collect()
        })
        .collect()
}

/// Rebuilds an adapted vector, reporting problems at `pointer`.
pub fn adapted_from_values(
    tree: &ScenarioTree,
    mode: Mode,
    dim: usize,
    values: &StageValues,
    pointer: &str,
) -> Result<AdaptedVector> {
    if values.len() != tree.stages() {
        return Err(Error::schema(
            pointer,
            format!("expected {} stages, found {}", tree.stages(), values.len()),
        ));
    }
    let mut stages = Vec::with_capacity(tree.stages());
    for (t, stage) in values.iter().enumerate() {
        let slots = crate::adapted::slot_count(tree, mode, t);
        let mut data = Vec::with_capacity(slots * dim);
        for k in 0..slots {
            let key = slot_key(tree, mode, t, k);
            let entry = stage
                .get(&key)
                .ok_or_else(|| Error::schema(format!("{pointer}/{t}"), format!("missing entry for node {key}")))?;
            if entry.len() != dim {
                return Err(Error::schema(
                    format!("{pointer}/{t}/{key}"),
                    format!("expected {dim} values, found {}", entry.len()),
                ));
            }
            data.extend_from_slice(entry);
        }
        if stage.len() != slots {
            let stray = stage
                .keys()
                .find(|key| (0..slots).all(|k| slot_key(tree, mode, t, k) != **key))
                .cloned()
                .unwrap_or_default();
            return Err(Error::schema(
                format!("{pointer}/{t}/{stray}"),
                format!("node {stray} is not a stage-{} {} of the tree", t + 1, slot_word(mode)),
            ));
        }
        stages.push(data);
    }
    AdaptedVector::from_stages(tree, mode, dim, stages)
}

fn slot_word(mode: Mode) -> &'static str {
    match mode {
        Mode::Builtin => "node",
        Mode::Relaxed => "scenario",
    }
}

impl PolicySpec {
    pub fn from_policy(tree: &ScenarioTree, v: &AdaptedVector) -> Self {
        Self {
            mode: v.mode(),
            dim: v.dim(),
            stages: stage_values(tree, v),
        }
    }

    pub fn build(&self, tree: &ScenarioTree, pointer: &str) -> Result<AdaptedVector> {
        adapted_from_values(tree, self.mode, self.dim, &self.stages, &format!("{pointer}/stages"))
    }
}

impl CertificateSpec {
    pub fn from_certificate(tree: &ScenarioTree, cert: &MultiplierCertificate) -> Self {
        Self {
            mode: cert.mode,
            g: stage_values(tree, &cert.g),
            psi: stage_values(tree, &cert.psi),
            n: stage_values(tree, &cert.n),
            lambda: cert.lambda.as_ref().map(|l| stage_values(tree, l)),
        }
    }

    pub fn build(&self, tree: &ScenarioTree, n: usize, m: usize, pointer: &str) -> Result<MultiplierCertificate> {
        let layout = self.mode.layout();
        let part = |v: &StageValues, dim: usize, name: &str| {
            adapted_from_values(tree, layout, dim, v, &format!("{pointer}/{name}"))
        };
        let lambda = match (self.mode, &self.lambda) {
            (CertificateMode::Explicit, Some(l)) => Some(part(l, n, "lambda")?),
            (CertificateMode::Explicit, None) => {
                return Err(Error::schema(pointer, "explicit certificate needs lambda"));
            }
            (CertificateMode::Builtin, Some(_)) => {
                return Err(Error::schema(format!("{pointer}/lambda"), "builtin certificates carry no lambda"));
            }
            (CertificateMode::Builtin, None) => None,
        };
        Ok(MultiplierCertificate {
            mode: self.mode,
            g: part(&self.g, n, "g")?,
            psi: part(&self.psi, m, "psi")?,
            n: part(&self.n, n, "n")?,
            lambda,
        })
    }
}

fn family_from_spec(tree: &ScenarioTree, dim: usize, spec: &SetFamilySpec, pointer: &str) -> Result<DecomposableFamily> {
    for key in spec.keys() {
        if key == "*" {
            continue;
        }
        let known = key.parse::<u64>().ok().and_then(|id| tree.node_index(id)).is_some();
        if !known {
            return Err(Error::schema(
                format!("{pointer}/{key}"),
                format!("node {key} does not exist in the tree"),
            ));
        }
    }
    let mut sets = Vec::with_capacity(tree.num_nodes());
    for node in 0..tree.num_nodes() {
        let id = tree.node_id(node).to_string();
        let (key, set) = match spec.get(&id) {
            Some(s) => (id.clone(), s),
            None => (
                "*".to_string(),
                spec.get("*")
                    .ok_or_else(|| Error::schema(pointer, format!("no set for node {id} and no \"*\" entry")))?,
            ),
        };
        if set.dim() != dim {
            return Err(Error::schema(
                format!("{pointer}/{key}"),
                format!("set has dimension {}, expected {dim}", set.dim()),
            ));
        }
        set.validate().map_err(|e| Error::schema(format!("{pointer}/{key}"), e.to_string()))?;
        sets.push(set.clone());
    }
    DecomposableFamily::new(tree, dim, sets)
}

fn family_to_spec(tree: &ScenarioTree, family: &DecomposableFamily) -> SetFamilySpec {
    let sets = family.sets();
    if sets.windows(2).all(|w| w[0] == w[1]) {
        return BTreeMap::from([("*".to_string(), sets[0].clone())]);
    }
    sets.iter()
        .enumerate()
        .map(|(node, s)| (tree.node_id(node).to_string(), s.clone()))
        .collect()
}

impl ProblemInstanceFile {
    pub fn from_problem(
        problem: &Problem,
        policy: Option<&AdaptedVector>,
        certificate: Option<&MultiplierCertificate>,
    ) -> Self {
        let tree = problem.tree();
        Self {
            version: FORMAT_VERSION,
            tree: tree.to_spec(),
            operator: problem.operator().to_spec(tree),
            x_sets: family_to_spec(tree, problem.x_family()),
            y_sets: family_to_spec(tree, problem.y_family()),
            objective: problem.objective.to_spec(tree),
            constants: DeclaredConstants {
                l_phi: problem.l_phi,
                c: problem.constraints.recourse_c,
            },
            p: problem.p(),
            policy: policy.map(|v| PolicySpec::from_policy(tree, v)),
            certificate: certificate.map(|c| CertificateSpec::from_certificate(tree, c)),
        }
    }

    /// Resolves every reference and builds the problem.
    pub fn load(&self) -> Result<LoadedInstance> {
        if self.version != FORMAT_VERSION {
            return Err(Error::schema(
                "/version",
                format!("unsupported format version {} (expected {FORMAT_VERSION})", self.version),
            ));
        }
        let tree = ScenarioTree::build(&self.tree).map_err(|e| Error::schema("/tree", e.to_string()))?;
        for (name, v) in [("l_phi", self.constants.l_phi), ("c", self.constants.c)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::schema(format!("/constants/{name}"), format!("must be positive, got {v}")));
            }
        }
        if !(self.operator.c_f > 0.0) || !self.operator.c_f.is_finite() {
            return Err(Error::schema("/operator/c_f", "must be positive"));
        }
        let operator = CausalOperator::from_spec(&tree, &self.operator)?;
        let x_family = family_from_spec(&tree, operator.n(), &self.x_sets, "/x_sets")?;
        let y_family = family_from_spec(&tree, operator.m(), &self.y_sets, "/y_sets")?;
        let objective = Objective::from_spec(&tree, operator.n(), &self.objective)?;
        let (n, m) = (operator.n(), operator.m());
        let constraints = RecourseInstance::new(tree.clone(), operator, x_family, y_family, self.constants.c, self.p)?;
        let problem = Problem::new(constraints, objective, self.constants.l_phi)?;
        let policy = match &self.policy {
            Some(p) => {
                if p.dim != n {
                    return Err(Error::schema("/policy/dim", format!("expected {n}, found {}", p.dim)));
                }
                Some(p.build(&tree, "/policy")?)
            }
            None => None,
        };
        let certificate = match &self.certificate {
            Some(c) => Some(c.build(&tree, n, m, "/certificate")?),
            None => None,
        };
        Ok(LoadedInstance {
            problem,
            policy,
            certificate,
        })
    }
}

/// Sorted-key, 17-significant-digit JSON.
pub fn to_canonical_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::schema("", e.to_string()))?;
    let v = sort_keys(v);
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter::default());
    v.serialize(&mut ser).map_err(|e| Error::schema("", e.to_string()))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

// Rebuilt objects insert keys in sorted order, which also fixes the order
// when serde_json preserves insertion order.
fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

#[derive(Default)]
struct CanonicalFormatter {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }

    fn end_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_key(w)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

/// Deserializes JSON, locating failures with a JSON pointer.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let pointer: String = err
            .path()
            .iter()
            .filter_map(|seg| match seg {
                serde_path_to_error::Segment::Seq { index } => Some(format!("/{index}")),
                serde_path_to_error::Segment::Map { key } => Some(format!("/{}", escape_pointer(key))),
                _ => None,
            })
            .collect();
        Error::schema(pointer, err.into_inner().to_string())
    })?;
    de.end().map_err(|e| Error::schema("", e.to_string()))?;
    Ok(value)
}

fn escape_pointer(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

pub fn parse_instance_str(text: &str) -> Result<ProblemInstanceFile> {
    from_json_str(text)
}

pub fn parse_instance(path: impl AsRef<Path>) -> Result<ProblemInstanceFile> {
    parse_instance_str(&std::fs::read_to_string(path)?)
}

pub fn serialize_instance(file: &ProblemInstanceFile, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_canonical_string(file)?)?;
    Ok(())
}

pub fn parse_policy(path: impl AsRef<Path>) -> Result<PolicySpec> {
    from_json_str(&std::fs::read_to_string(path)?)
}

pub fn parse_certificate(path: impl AsRef<Path>) -> Result<CertificateSpec> {
    from_json_str(&std::fs::read_to_string(path)?)
}
