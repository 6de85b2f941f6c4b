//! Augmentation policies: gated transforms, sub-policies and full policies,
//! RandAugment's lazily sampled policy, and the training-time pipeline that
//! stacks flip and crop under them.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::imageops::{self, apply_transform, magnitude_to_param, Image, OpId};
use crate::rng::Rng;

/// Anything that turns an image into a randomly augmented view.
pub trait Augment: Send + Sync {
    fn augment(&self, img: &Image, rng: &mut Rng) -> Result<Image>;

    fn describe(&self) -> String;
}

/// One operation with its application probability and unit magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub op: OpId,
    pub p: f64,
    pub lambda: f64,
}

impl TransformSpec {
    pub fn new(op: OpId, p: f64, lambda: f64) -> Result<Self> {
        let spec = TransformSpec { op, p, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("p", self.p), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!(
                    "{what} = {v} for {} is outside [0, 1]",
                    self.op
                )));
            }
        }
        Ok(())
    }

    /// Expected strength `p * lambda`.
    pub fn strength(&self) -> f64 {
        self.p * self.lambda
    }

    /// Applies the operation with probability `p`.
    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        let fire = self.p >= 1.0 || (self.p > 0.0 && rng.random_bool(self.p));
        if !fire {
            return Ok(img.clone());
        }
        let param = magnitude_to_param(self.op, self.lambda)?;
        apply_transform(img, self.op, param, rng)
    }
}

/// Applies the transforms in order, each behind its own Bernoulli gate.
pub fn apply_sequence(specs: &[TransformSpec], img: &Image, rng: &mut Rng) -> Result<Image> {
    let mut cur = img.clone();
    for spec in specs {
        cur = spec.apply(&cur, rng)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPolicy {
    transforms: Vec<TransformSpec>,
}

impl SubPolicy {
    pub fn new(transforms: Vec<TransformSpec>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::contract("a sub-policy needs at least one transform"));
        }
        for t in &transforms {
            t.validate()?;
        }
        Ok(SubPolicy { transforms })
    }

    pub fn transforms(&self) -> &[TransformSpec] {
        &self.transforms
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        apply_sequence(&self.transforms, img, rng)
    }
}

/// Where a policy came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub loss_kind: Option<String>,
    pub seeds: Vec<u64>,
    pub fold_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    name: String,
    sub_policies: Vec<SubPolicy>,
    pub provenance: Provenance,
}

impl Policy {
    pub fn new(name: impl Into<String>, sub_policies: Vec<SubPolicy>) -> Result<Self> {
        if sub_policies.is_empty() {
            return Err(Error::contract("a policy needs at least one sub-policy"));
        }
        Ok(Policy {
            name: name.into(),
            sub_policies,
            provenance: Provenance::default(),
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sub_policies(&self) -> &[SubPolicy] {
        &self.sub_policies
    }

    /// One operation applied every time with its magnitude redrawn per call,
    /// encoded as the 30 RandAugment magnitude levels with `p = 1`.
    /// Random-resize-crop already randomizes its own scale and gets a single
    /// entry covering the full `(0.2, 1.0)` area range.
    pub fn single_op(op: OpId) -> Self {
        let subs = if op == OpId::RandomResizeCrop || op == OpId::HorizontalFlip {
            vec![SubPolicy {
                transforms: vec![TransformSpec { op, p: 1.0, lambda: 0.0 }],
            }]
        } else {
            (1..=30)
                .map(|level| SubPolicy {
                    transforms: vec![TransformSpec {
                        op,
                        p: 1.0,
                        lambda: (level - 1) as f64 / 29.0,
                    }],
                })
                .collect()
        };
        Policy {
            name: format!("single:{op}"),
            sub_policies: subs,
            provenance: Provenance::default(),
        }
    }

    /// Samples a sub-policy uniformly and applies it.
    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        let sub = self
            .sub_policies
            .choose(rng)
            .expect("policy is never empty");
        sub.apply(img, rng)
    }

    /// Mean of `p * lambda` over every transform of every sub-policy.
    pub fn mean_strength(&self) -> f64 {
        let (sum, n) = self
            .sub_policies
            .iter()
            .flat_map(|s| s.transforms.iter())
            .fold((0.0, 0usize), |(s, n), t| (s + t.strength(), n + 1));
        sum / n as f64
    }

    /// Canonical JSON: sorted keys, floats with six decimals, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\"name\":");
        out.push_str(&json_string(&self.name));
        out.push_str(",\"provenance\":{\"foldIds\":[");
        join_into(&mut out, self.provenance.fold_ids.iter().map(|v| v.to_string()));
        out.push_str("],\"lossKind\":");
        match &self.provenance.loss_kind {
            Some(k) => out.push_str(&json_string(k)),
            None => out.push_str("null"),
        }
        out.push_str(",\"seeds\":[");
        join_into(&mut out, self.provenance.seeds.iter().map(|v| v.to_string()));
        out.push_str("]},\"subPolicies\":[");
        join_into(
            &mut out,
            self.sub_policies.iter().map(|sub| {
                let mut s = String::from("[");
                join_into(
                    &mut s,
                    sub.transforms.iter().map(|t| {
                        format!(
                            "{{\"lambda\":{},\"op\":{},\"p\":{}}}",
                            fixed6(t.lambda),
                            json_string(t.op.name()),
                            fixed6(t.p)
                        )
                    }),
                );
                s.push(']');
                s
            }),
        );
        out.push_str("]}");
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::parse("document", e.to_string()))?;
        Policy::from_value(&value)
    }

    fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse("document", "expected a JSON object"))?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse("name", "missing or not a string"))?
            .to_owned();
        let subs = obj
            .get("subPolicies")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse("subPolicies", "missing or not an array"))?;
        if subs.is_empty() {
            return Err(Error::parse("subPolicies", "must contain at least one sub-policy"));
        }
        let mut sub_policies = Vec::with_capacity(subs.len());
        for (i, sub) in subs.iter().enumerate() {
            let field = format!("subPolicies[{i}]");
            let items = sub
                .as_array()
                .ok_or_else(|| Error::parse(&field, "not an array"))?;
            if items.is_empty() {
                return Err(Error::parse(&field, "must contain at least one transform"));
            }
            let mut transforms = Vec::with_capacity(items.len());
            for (j, item) in items.iter().enumerate() {
                transforms.push(parse_transform(item, &format!("{field}[{j}]"))?);
            }
            sub_policies.push(SubPolicy { transforms });
        }
        let provenance = match obj.get("provenance") {
            None | Some(Value::Null) => Provenance::default(),
            Some(p) => parse_provenance(p)?,
        };
        Ok(Policy {
            name,
            sub_policies,
            provenance,
        })
    }
}

impl Augment for Policy {
    fn augment(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        self.apply(img, rng)
    }

    fn describe(&self) -> String {
        format!("{} ({} sub-policies)", self.name, self.sub_policies.len())
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let value: Value =
            serde_json::from_str(&self.to_canonical_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Policy::from_value(&value).map_err(serde::de::Error::custom)
    }
}

pub fn serialize_policy(policy: &Policy) -> Vec<u8> {
    policy.to_canonical_json().into_bytes()
}

pub fn deserialize_policy(bytes: &[u8]) -> Result<Policy> {
    Policy::from_json(bytes)
}

fn parse_transform(item: &Value, field: &str) -> Result<TransformSpec> {
    let obj = item
        .as_object()
        .ok_or_else(|| Error::parse(field, "expected an object"))?;
    let op_name = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(format!("{field}.op"), "missing or not a string"))?;
    let op: OpId = op_name
        .parse()
        .map_err(|_| Error::parse(format!("{field}.op"), format!("unknown operation {op_name:?}")))?;
    let unit = |key: &str| -> Result<f64> {
        let f = format!("{field}.{key}");
        let v = obj
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::parse(&f, "missing or not a number"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(&f, format!("value {v} is outside [0, 1]")));
        }
        Ok(v)
    };
    let p = unit("p")?;
    let lambda = unit("lambda")?;
    Ok(TransformSpec { op, p, lambda })
}

fn parse_provenance(value: &Value) -> Result<Provenance> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::parse("provenance", "expected an object"))?;
    let loss_kind = match obj.get("lossKind") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::parse("provenance.lossKind", "not a string")),
    };
    let ints = |key: &str| -> Result<Vec<u64>> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_u64().ok_or_else(|| {
                        Error::parse(format!("provenance.{key}"), "expected non-negative integers")
                    })
                })
                .collect(),
            Some(_) => Err(Error::parse(format!("provenance.{key}"), "not an array")),
        }
    };
    Ok(Provenance {
        loss_kind,
        seeds: ints("seeds")?,
        fold_ids: ints("foldIds")?.into_iter().map(|v| v as usize).collect(),
    })
}

fn fixed6(v: f64) -> String {
    // avoid "-0.000000"
    let s = format!("{:.6}", v);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_owned()
    } else {
        s
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn join_into(out: &mut String, items: impl Iterator<Item = String>) {
    for (i, item) in items.enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{item}");
    }
}

/// RandAugment's two-parameter search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RandAugmentConfig {
    pub n_tau: usize,
    pub lambda_discrete: u32,
    #[serde(default = "all_searchable")]
    pub op_subset: Vec<OpId>,
}

fn all_searchable() -> Vec<OpId> {
    OpId::SEARCHABLE.to_vec()
}

impl RandAugmentConfig {
    pub fn new(n_tau: usize, lambda_discrete: u32) -> Self {
        RandAugmentConfig {
            n_tau,
            lambda_discrete,
            op_subset: all_searchable(),
        }
    }
}

/// Draws `n_tau` operations per call, all at one shared magnitude and gated
/// with `p = 1 / K` for `K` candidate operations.
#[derive(Debug, Clone, PartialEq)]
pub struct RandAugmentPolicy {
    config: RandAugmentConfig,
    lambda: f64,
    p: f64,
}

impl RandAugmentPolicy {
    pub fn config(&self) -> &RandAugmentConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Draws the transforms used by one application.
    pub fn sample(&self, rng: &mut Rng) -> Vec<TransformSpec> {
        (0..self.config.n_tau)
            .map(|_| TransformSpec {
                op: *self.config.op_subset.choose(rng).expect("non-empty subset"),
                p: self.p,
                lambda: self.lambda,
            })
            .collect()
    }
}

impl Augment for RandAugmentPolicy {
    fn augment(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        let specs = self.sample(rng);
        apply_sequence(&specs, img, rng)
    }

    fn describe(&self) -> String {
        format!(
            "randaugment(n={}, m={}, k={})",
            self.config.n_tau,
            self.config.lambda_discrete,
            self.config.op_subset.len()
        )
    }
}

pub fn make_randaugment_policy(cfg: &RandAugmentConfig) -> Result<RandAugmentPolicy> {
    if cfg.op_subset.is_empty() {
        return Err(Error::contract("RandAugment needs a non-empty operation subset"));
    }
    if cfg.n_tau == 0 {
        return Err(Error::contract("RandAugment needs n_tau >= 1"));
    }
    let lambda = imageops::discrete_to_unit(cfg.lambda_discrete)?;
    Ok(RandAugmentPolicy {
        p: 1.0 / cfg.op_subset.len() as f64,
        lambda,
        config: cfg.clone(),
    })
}

/// One stage of a training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum Stage {
    Policy { policy: Policy },
    RandAugment { config: RandAugmentConfig },
}

/// Training-time augmentation: optional random flip and random-resize-crop,
/// then each stage in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Pipeline {
    pub name: String,
    #[serde(default)]
    pub flip: bool,
    /// Area-fraction range of the random-resize-crop.
    #[serde(default)]
    pub crop: Option<(f64, f64)>,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(skip)]
    compiled: Vec<CompiledStage>,
}

#[derive(Debug, Clone, PartialEq)]
enum CompiledStage {
    Policy(Policy),
    RandAugment(RandAugmentPolicy),
}

impl Pipeline {
    /// Flip with `p = 0.5` plus random-resize-crop over `(0.2, 1.0)`.
    pub fn base() -> Self {
        Pipeline {
            name: "base".into(),
            flip: true,
            crop: Some((0.2, 1.0)),
            stages: Vec::new(),
            compiled: Vec::new(),
        }
    }

    /// Flip only.
    pub fn flip_only() -> Self {
        Pipeline {
            name: "flip".into(),
            flip: true,
            crop: None,
            stages: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn identity() -> Self {
        Pipeline {
            name: "identity".into(),
            flip: false,
            crop: None,
            stages: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.compiled.push(CompiledStage::Policy(policy.clone()));
        self.stages.push(Stage::Policy { policy });
        self
    }

    pub fn with_randaugment(mut self, config: RandAugmentConfig) -> Result<Self> {
        let compiled = make_randaugment_policy(&config)?;
        self.compiled.push(CompiledStage::RandAugment(compiled));
        self.stages.push(Stage::RandAugment { config });
        Ok(self)
    }

    /// Rebuilds the executable stages after deserialization.
    pub fn compile(mut self) -> Result<Self> {
        self.compiled = self
            .stages
            .iter()
            .map(|s| match s {
                Stage::Policy { policy } => Ok(CompiledStage::Policy(policy.clone())),
                Stage::RandAugment { config } => {
                    make_randaugment_policy(config).map(CompiledStage::RandAugment)
                }
            })
            .collect::<Result<_>>()?;
        if let Some((lo, hi)) = self.crop {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("crop range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(self)
    }
}

impl Augment for Pipeline {
    fn augment(&self, img: &Image, rng: &mut Rng) -> Result<Image> {
        debug_assert_eq!(self.compiled.len(), self.stages.len(), "pipeline not compiled");
        let mut cur = if self.flip && rng.random_bool(0.5) {
            imageops::horizontal_flip(img)
        } else {
            img.clone()
        };
        if let Some(range) = self.crop {
            cur = imageops::random_resize_crop(&cur, rng, range, (img.height(), img.width()))?;
        }
        for stage in &self.compiled {
            cur = match stage {
                CompiledStage::Policy(p) => p.apply(&cur, rng)?,
                CompiledStage::RandAugment(r) => r.augment(&cur, rng)?,
            };
        }
        Ok(cur)
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// An approximation of the MoCo v2 recipe expressed in the available
/// operations: strong crop plus colour perturbations, for use as a fixed base.
pub fn mocov2_like() -> Policy {
    let mut subs = Vec::new();
    for &(b, c, s) in &[(0.3, 0.3, 0.3), (0.7, 0.7, 0.7), (0.3, 0.7, 0.5), (0.7, 0.3, 0.5)] {
        subs.push(SubPolicy {
            transforms: vec![
                TransformSpec { op: OpId::RandomResizeCrop, p: 1.0, lambda: 0.0 },
                TransformSpec { op: OpId::Brightness, p: 0.8, lambda: b },
                TransformSpec { op: OpId::Contrast, p: 0.8, lambda: c },
                TransformSpec { op: OpId::Color, p: 0.8, lambda: s },
                TransformSpec { op: OpId::Sharpness, p: 0.5, lambda: 0.1 },
            ],
        });
    }
    Policy {
        name: "mocov2-like".into(),
        sub_policies: subs,
        provenance: Provenance::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn img() -> Image {
        Image::from_fn(8, 8, |c, y, x| ((c * 40 + y * 8 + x * 3) % 256) as f32 / 255.0)
    }

    fn one(op: OpId, p: f64, lambda: f64) -> Policy {
        Policy::new("t", vec![SubPolicy::new(vec![TransformSpec::new(op, p, lambda).unwrap()]).unwrap()])
            .unwrap()
    }

    #[test]
    fn zero_probability_never_fires() {
        let p = one(OpId::Invert, 0.0, 0.5);
        let mut r = rng::stream(1, &[]);
        for _ in 0..20 {
            assert_eq!(p.apply(&img(), &mut r).unwrap(), img());
        }
    }

    #[test]
    fn double_invert_is_identity_on_dyadic_pixels() {
        let dyadic = Image::from_fn(8, 8, |c, y, x| ((c * 40 + y * 8 + x * 3) % 256) as f32 / 256.0);
        let spec = TransformSpec::new(OpId::Invert, 1.0, 0.0).unwrap();
        let p = Policy::new("inv2", vec![SubPolicy::new(vec![spec, spec]).unwrap()]).unwrap();
        let mut r = rng::stream(1, &[]);
        assert_eq!(p.apply(&dyadic, &mut r).unwrap(), dyadic);
    }

    #[test]
    fn apply_is_seed_deterministic() {
        let p = Policy::single_op(OpId::Cutout);
        let a = p.apply(&img(), &mut rng::stream(9, &[1])).unwrap();
        let b = p.apply(&img(), &mut rng::stream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn order_matters_for_rotate_and_cutout() {
        let base = Image::from_fn(16, 16, |c, y, x| ((c + y * 16 + x) % 256) as f32 / 255.0);
        let rot = TransformSpec::new(OpId::Rotate, 1.0, 1.0).unwrap();
        let cut = TransformSpec::new(OpId::Cutout, 1.0, 1.0).unwrap();
        let a = apply_sequence(&[rot, cut], &base, &mut rng::stream(4, &[])).unwrap();
        let b = apply_sequence(&[cut, rot], &base, &mut rng::stream(4, &[])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn randaugment_probabilities() {
        let cfg = RandAugmentConfig::new(2, 9);
        let ra = make_randaugment_policy(&cfg).unwrap();
        assert!((ra.p() - 1.0 / 15.0).abs() < 1e-12);
        let cfg = RandAugmentConfig {
            n_tau: 2,
            lambda_discrete: 4,
            op_subset: vec![OpId::Rotate, OpId::Color, OpId::Invert],
        };
        assert!((make_randaugment_policy(&cfg).unwrap().p() - 1.0 / 3.0).abs() < 1e-12);
        let ra = make_randaugment_policy(&RandAugmentConfig::new(1, 1)).unwrap();
        let specs = ra.sample(&mut rng::stream(0, &[]));
        assert_eq!(specs.len(), 1);
        let param = magnitude_to_param(specs[0].op, specs[0].lambda).unwrap();
        assert_eq!(param, specs[0].op.range().min);
        let empty = RandAugmentConfig {
            n_tau: 1,
            lambda_discrete: 1,
            op_subset: vec![],
        };
        assert!(make_randaugment_policy(&empty).is_err());
    }

    #[test]
    fn canonical_json_round_trip() {
        let mut p = Policy::new(
            "demo",
            vec![
                SubPolicy::new(vec![
                    TransformSpec::new(OpId::Rotate, 0.25, 0.5).unwrap(),
                    TransformSpec::new(OpId::Cutout, 1.0, 0.125).unwrap(),
                ])
                .unwrap(),
                SubPolicy::new(vec![TransformSpec::new(OpId::Equalize, 0.5, 0.0).unwrap()]).unwrap(),
            ],
        )
        .unwrap();
        p.provenance.loss_kind = Some("minimax".into());
        p.provenance.seeds = vec![3, 4];
        p.provenance.fold_ids = vec![0, 1];
        let json = p.to_canonical_json();
        assert_eq!(
            json,
            "{\"name\":\"demo\",\"provenance\":{\"foldIds\":[0,1],\"lossKind\":\"minimax\",\"seeds\":[3,4]},\
             \"subPolicies\":[[{\"lambda\":0.500000,\"op\":\"rotate\",\"p\":0.250000},\
             {\"lambda\":0.125000,\"op\":\"cutout\",\"p\":1.000000}],\
             [{\"lambda\":0.000000,\"op\":\"equalize\",\"p\":0.500000}]]}"
        );
        let back = deserialize_policy(json.as_bytes()).unwrap();
        assert_eq!(back, p);
        assert_eq!(serialize_policy(&back), json.into_bytes());
    }

    #[test]
    fn parse_errors_name_the_field() {
        let bad_op = br#"{"name":"x","subPolicies":[[{"op":"blurX","p":0.5,"lambda":0.5}]]}"#;
        match deserialize_policy(bad_op) {
            Err(Error::Parse { field, message }) => {
                assert_eq!(field, "subPolicies[0][0].op");
                assert!(message.contains("blurX"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_p = br#"{"name":"x","subPolicies":[[{"op":"rotate","p":1.5,"lambda":0.5}]]}"#;
        match deserialize_policy(bad_p) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "subPolicies[0][0].p"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(deserialize_policy(b"{not json").is_err());
        assert!(deserialize_policy(br#"{"name":"x","subPolicies":[]}"#).is_err());
    }

    #[test]
    fn pipeline_serde_round_trip() {
        let pipe = Pipeline::base()
            .with_policy(deserialize_policy(&serialize_policy(&Policy::single_op(OpId::Solarize))).unwrap())
            .with_randaugment(RandAugmentConfig::new(2, 5))
            .unwrap();
        let json = serde_json::to_string(&pipe).unwrap();
        let back: Pipeline = serde_json::from_str(&json).unwrap();
        let back = back.compile().unwrap();
        assert_eq!(back, pipe);
        let a = pipe.augment(&img(), &mut rng::stream(2, &[])).unwrap();
        let b = back.augment(&img(), &mut rng::stream(2, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_op_policy_spans_magnitudes() {
        let p = Policy::single_op(OpId::Rotate);
        assert_eq!(p.sub_policies().len(), 30);
        assert_eq!(p.sub_policies()[29].transforms()[0].lambda, 1.0);
        assert_eq!(Policy::single_op(OpId::RandomResizeCrop).sub_policies().len(), 1);
    }
}
