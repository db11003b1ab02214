// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-weighted relevancy propagation through attention layers.
//!
//! Relevancy is kept as a set of maps `R^{sq}` whose row `m` scores how much
//! each token of domain `q` contributes to token `m` of domain `s`. Self maps
//! start as the identity and cross maps as zero. Each attention record, head
//! averaged with its gradient, then updates the maps it touches:
//!
//! * self-attention over `s`:  `R^ss += Ā·R^ss` and `R^sq += Ā·R^sq`
//! * attention from `s` into `q`: `R^sq += (R̄^ss)ᵀ·Ā·R̄^qq` and `R^ss += Ā·R^qs`
//!
//! where `R̄^xx` is `R^xx − I` row-normalized, plus `I`. Maps that do not exist
//! for an architecture (e.g. encoder-to-decoder) simply skip their rule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ForwardTrace, RecordKind, Target};
use crate::numeric::Tensor;

/// Rows of `R^xx − I` whose sum does not exceed this are left at zero.
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// Token set a relevancy map indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Text,
    Image,
    /// Concatenated text and image tokens of a pure self-attention model.
    Joint,
    Encoder,
    Decoder,
}

impl Domain {
    pub fn letter(self) -> char {
        match self {
            Domain::Text => 't',
            Domain::Image => 'i',
            Domain::Joint => 'j',
            Domain::Encoder => 'e',
            Domain::Decoder => 'd',
        }
    }
}

/// Query and key domains of an attention record.
pub fn record_domains(kind: RecordKind) -> (Domain, Domain) {
    use RecordKind::*;
    match kind {
        SelfText => (Domain::Text, Domain::Text),
        SelfImage => (Domain::Image, Domain::Image),
        SelfJoint => (Domain::Joint, Domain::Joint),
        CrossTextFromImage => (Domain::Text, Domain::Image),
        CrossImageFromText => (Domain::Image, Domain::Text),
        EncoderSelf => (Domain::Encoder, Domain::Encoder),
        DecoderSelf => (Domain::Decoder, Domain::Decoder),
        DecoderCross => (Domain::Decoder, Domain::Encoder),
    }
}

/// Propagation rule set; `Full` is the method, the rest are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Cross rules use the raw accumulated self maps instead of `R̄`.
    NoNormalization,
    /// Every rule overwrites its map instead of adding to it.
    NoAggregation,
    /// Cross rule becomes `R^sq += Ā`.
    NoSelfAttInCross,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoNormalization,
        AblationVariant::NoAggregation,
        AblationVariant::NoSelfAttInCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoNormalization => "no_normalization",
            AblationVariant::NoAggregation => "no_aggregation",
            AblationVariant::NoSelfAttInCross => "no_self_att_in_cross",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}`")))
    }
}

/// Token counts a state is sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounts {
    Bimodal { text: usize, image: usize },
    EncoderDecoder { encoder: usize, decoder: usize },
}

/// The aggregated relevancy maps of one propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyState {
    architecture: Architecture,
    counts: TokenCounts,
    maps: BTreeMap<(Domain, Domain), Tensor>,
}

/// Identity self maps and zero cross maps for an architecture.
pub fn init_state(arch: Architecture, counts: TokenCounts) -> Result<RelevancyState> {
    let mut maps = BTreeMap::new();
    match (arch, counts) {
        (Architecture::PureSelf, TokenCounts::Bimodal { text, image }) if text > 0 && image > 0 => {
            maps.insert((Domain::Joint, Domain::Joint), Tensor::eye(text + image));
        }
        (Architecture::SelfPlusCo, TokenCounts::Bimodal { text, image }) if text > 0 && image > 0 => {
            maps.insert((Domain::Text, Domain::Text), Tensor::eye(text));
            maps.insert((Domain::Image, Domain::Image), Tensor::eye(image));
            maps.insert((Domain::Text, Domain::Image), Tensor::zeros(&[text, image]));
            maps.insert((Domain::Image, Domain::Text), Tensor::zeros(&[image, text]));
        }
        (Architecture::EncoderDecoder, TokenCounts::EncoderDecoder { encoder, decoder })
            if encoder > 0 && decoder > 0 =>
        {
            maps.insert((Domain::Encoder, Domain::Encoder), Tensor::eye(encoder));
            maps.insert((Domain::Decoder, Domain::Decoder), Tensor::eye(decoder));
            maps.insert((Domain::Decoder, Domain::Encoder), Tensor::zeros(&[decoder, encoder]));
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "token counts {counts:?} do not fit a {arch} model"
            )))
        }
    }
    Ok(RelevancyState {
        architecture: arch,
        counts,
        maps,
    })
}

impl RelevancyState {
    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn counts(&self) -> TokenCounts {
        self.counts
    }

    pub fn get(&self, s: Domain, q: Domain) -> Option<&Tensor> {
        self.maps.get(&(s, q))
    }

    fn require(&self, s: Domain, q: Domain) -> Result<&Tensor> {
        self.get(s, q).ok_or_else(|| {
            Error::Trace(format!(
                "a {} state has no R^{}{} map",
                self.architecture,
                s.letter(),
                q.letter()
            ))
        })
    }

    fn put(&mut self, s: Domain, q: Domain, t: Tensor) {
        let slot = self.maps.get_mut(&(s, q)).expect("map exists");
        debug_assert_eq!(slot.shape(), t.shape());
        *slot = t;
    }

    /// Maps in a fixed order, keyed by names like `R_ti`.
    pub fn named_maps(&self) -> Vec<(String, &Tensor)> {
        self.maps
            .iter()
            .map(|((s, q), t)| (format!("R_{}{}", s.letter(), q.letter()), t))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &RelevancyState) -> f64 {
        assert_eq!(self.maps.len(), other.maps.len());
        self.maps
            .iter()
            .map(|(k, t)| t.max_abs_diff(&other.maps[k]))
            .fold(0.0, f64::max)
    }

    /// Builds a state from explicitly given maps; used by baselines whose
    /// output shares the layout of a propagated state.
    pub(crate) fn with_maps(&self, maps: BTreeMap<(Domain, Domain), Tensor>) -> RelevancyState {
        debug_assert!(maps.keys().eq(self.maps.keys()));
        RelevancyState {
            architecture: self.architecture,
            counts: self.counts,
            maps,
        }
    }

    pub(crate) fn map_keys(&self) -> impl Iterator<Item = (Domain, Domain)> + '_ {
        self.maps.keys().copied()
    }

    /// Other maps whose query side is `s`, e.g. `R^ti` for `s = t`.
    fn cross_maps_from(&self, s: Domain) -> Vec<Domain> {
        self.maps
            .keys()
            .filter(|(a, b)| *a == s && *b != s)
            .map(|&(_, b)| b)
            .collect()
    }
}

/// `Ā = mean_h max(∇A ⊙ A, 0)` over the leading heads axis.
pub fn head_average(attention: &Tensor, grad: Option<&Tensor>) -> Result<Tensor> {
    let grad = grad.ok_or_else(|| {
        Error::PropagationOrder("head averaging needs the attention gradient".into())
    })?;
    if attention.rank() != 3 || attention.shape() != grad.shape() {
        return Err(Error::shape("head_average", attention.shape(), grad.shape()));
    }
    let (h, s, q) = attention.dims3();
    let mut out = vec![0.0; s * q];
    for head in 0..h {
        let a = &attention.data()[head * s * q..(head + 1) * s * q];
        let g = &grad.data()[head * s * q..(head + 1) * s * q];
        for ((o, &x), &dx) in out.iter_mut().zip(a).zip(g) {
            *o += (x * dx).max(0.0);
        }
    }
    let inv = 1.0 / h as f64;
    Tensor::from_vec(vec![s, q], out.into_iter().map(|x| x * inv).collect())
}

/// `R̄ = (R − I) / rowsum(R − I) + I`; rows summing to at most
/// [`ZERO_ROW_EPS`] stay zero before the identity is added back.
pub fn normalize_self(r: &Tensor) -> Tensor {
    let (n, m) = r.dims2();
    assert_eq!(n, m, "self map must be square");
    let mut out = r.sub(&Tensor::eye(n)).expect("square");
    for row in out.data_mut().chunks_mut(n) {
        let sum: f64 = row.iter().sum();
        if sum > ZERO_ROW_EPS {
            for x in row.iter_mut() {
                *x /= sum;
            }
        } else {
            row.fill(0.0);
        }
    }
    for i in 0..n {
        out.data_mut()[i * n + i] += 1.0;
    }
    out
}

fn check_shape(abar: &Tensor, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if abar.rank() != 2 || abar.dims2() != (rows, cols) {
        return Err(Error::shape(what, abar.shape(), &[rows, cols]));
    }
    Ok(())
}

fn combine(variant: AblationVariant, old: &Tensor, delta: Tensor) -> Tensor {
    if variant == AblationVariant::NoAggregation {
        delta
    } else {
        old.add(&delta).expect("shapes checked")
    }
}

/// Self-attention update over `domain`.
pub fn apply_self(state: &mut RelevancyState, abar: &Tensor, domain: Domain, variant: AblationVariant) -> Result<()> {
    let r_ss = state.require(domain, domain)?.clone();
    let n = r_ss.rows();
    check_shape(abar, n, n, "apply_self")?;
    let delta = abar.matmul(&r_ss)?;
    state.put(domain, domain, combine(variant, &r_ss, delta));
    for q in state.cross_maps_from(domain) {
        let r_sq = state.require(domain, q)?.clone();
        let delta = abar.matmul(&r_sq)?;
        state.put(domain, q, combine(variant, &r_sq, delta));
    }
    Ok(())
}

/// Cross-attention update where domain `s` queries domain `q`.
pub fn apply_cross(
    state: &mut RelevancyState,
    abar: &Tensor,
    s: Domain,
    q: Domain,
    variant: AblationVariant,
) -> Result<()> {
    let snapshot = state.clone();
    apply_cross_from(state, &snapshot, abar, s, q, variant)
}

/// Like [`apply_cross`], but every map on the right-hand side is read from
/// `snapshot`, so several cross updates of one layer see the same inputs.
fn apply_cross_from(
    state: &mut RelevancyState,
    snapshot: &RelevancyState,
    abar: &Tensor,
    s: Domain,
    q: Domain,
    variant: AblationVariant,
) -> Result<()> {
    if s == q {
        return Err(Error::Trace(format!("cross update needs two domains, got {s:?} twice")));
    }
    let r_ss = snapshot.require(s, s)?;
    let r_qq = snapshot.require(q, q)?;
    snapshot.require(s, q)?;
    check_shape(abar, r_ss.rows(), r_qq.rows(), "apply_cross")?;

    let delta_sq = match variant {
        AblationVariant::NoSelfAttInCross => abar.clone(),
        AblationVariant::NoNormalization => r_ss.transpose().matmul(abar)?.matmul(r_qq)?,
        AblationVariant::Full | AblationVariant::NoAggregation => normalize_self(r_ss)
            .transpose()
            .matmul(abar)?
            .matmul(&normalize_self(r_qq))?,
    };
    let old = state.require(s, q)?.clone();
    state.put(s, q, combine(variant, &old, delta_sq));

    if let Some(r_qs) = snapshot.get(q, s) {
        let delta_ss = abar.matmul(r_qs)?;
        let old = state.require(s, s)?.clone();
        state.put(s, s, combine(variant, &old, delta_ss));
    }
    Ok(())
}

/// Runs every record of a gradient-filled trace through the update rules.
///
/// Consecutive cross records of the same layer are applied against a shared
/// snapshot of the state taken before the first of them.
pub fn propagate(trace: &ForwardTrace, variant: AblationVariant) -> Result<RelevancyState> {
    let arch = trace.architecture;
    let mut state = init_state(arch, counts_of(trace)?)?;
    let mut snapshot: Option<(usize, RelevancyState)> = None;
    for rec in &trace.records {
        if !rec.kind.belongs_to(arch) {
            return Err(Error::Trace(format!("{:?} record in a {arch} trace", rec.kind)));
        }
        let abar = head_average(&rec.attention, rec.grad.as_ref())?;
        let (s, q) = record_domains(rec.kind);
        if rec.kind.is_cross() {
            let reuse = matches!(&snapshot, Some((layer, _)) if *layer == rec.layer_index);
            if !reuse {
                snapshot = Some((rec.layer_index, state.clone()));
            }
            let (_, snap) = snapshot.as_ref().expect("set above");
            apply_cross_from(&mut state, snap, &abar, s, q, variant)?;
        } else {
            snapshot = None;
            apply_self(&mut state, &abar, s, variant)?;
        }
    }
    Ok(state)
}

/// Token counts implied by a trace's attention shapes.
pub fn counts_of(trace: &ForwardTrace) -> Result<TokenCounts> {
    let dims = |kind: RecordKind| {
        trace
            .last_of(kind)
            .map(|r| r.map_dims())
            .ok_or_else(|| Error::Trace(format!("trace has no {kind:?} record")))
    };
    match trace.architecture {
        Architecture::PureSelf => {
            // The joint split is not visible in the maps; recover it from the cls
            // row layout recorded on the trace.
            let (n, _) = dims(RecordKind::SelfJoint)?;
            let text = trace.text_tokens.ok_or_else(|| Error::Trace("pure-self trace lacks a text token count".into()))?;
            if text == 0 || text >= n {
                return Err(Error::Trace(format!("text count {text} does not split {n} joint tokens")));
            }
            Ok(TokenCounts::Bimodal { text, image: n - text })
        }
        Architecture::SelfPlusCo => {
            let (text, image) = dims(RecordKind::CrossTextFromImage)?;
            Ok(TokenCounts::Bimodal { text, image })
        }
        Architecture::EncoderDecoder => {
            let (decoder, encoder) = dims(RecordKind::DecoderCross)?;
            Ok(TokenCounts::EncoderDecoder { encoder, decoder })
        }
    }
}

/// Per-token scores from the classification row: text scores (the cls
/// position itself zeroed) and image scores.
pub fn extract_cls(state: &RelevancyState, cls_index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let TokenCounts::Bimodal { text, .. } = state.counts else {
        return Err(Error::InvalidInput("cls extraction needs a classification state".into()));
    };
    if cls_index >= text {
        return Err(Error::InvalidInput(format!(
            "cls index {cls_index} outside {text} text tokens"
        )));
    }
    let (mut text_scores, image_scores) = match state.architecture {
        Architecture::PureSelf => {
            let row = state.require(Domain::Joint, Domain::Joint)?.row(cls_index);
            (row[..text].to_vec(), row[text..].to_vec())
        }
        _ => (
            state.require(Domain::Text, Domain::Text)?.row(cls_index).to_vec(),
            state.require(Domain::Text, Domain::Image)?.row(cls_index).to_vec(),
        ),
    };
    text_scores[cls_index] = 0.0;
    Ok((text_scores, image_scores))
}

/// Row `j` of `R^de`: relevance of every encoder token to decoder query `j`.
pub fn extract_query(state: &RelevancyState, j: usize) -> Result<Vec<f64>> {
    let TokenCounts::EncoderDecoder { decoder, .. } = state.counts else {
        return Err(Error::InvalidInput("query extraction needs an encoder-decoder state".into()));
    };
    if j >= decoder {
        return Err(Error::InvalidInput(format!("query {j} outside {decoder} decoder tokens")));
    }
    Ok(state.require(Domain::Decoder, Domain::Encoder)?.row(j).to_vec())
}

/// JSON form of a state plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyDump {
    pub architecture: Architecture,
    pub method: String,
    pub variant: AblationVariant,
    pub target: Option<Target>,
    pub maps: BTreeMap<String, Vec<Vec<f64>>>,
}

impl RelevancyDump {
    pub fn new(state: &RelevancyState, method: &str, variant: AblationVariant, target: Option<Target>) -> Self {
        RelevancyDump {
            architecture: state.architecture,
            method: method.to_string(),
            variant,
            target,
            maps: state
                .named_maps()
                .into_iter()
                .map(|(k, t)| (k, t.to_rows()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn bimodal(t: usize, i: usize) -> RelevancyState {
        init_state(Architecture::SelfPlusCo, TokenCounts::Bimodal { text: t, image: i }).unwrap()
    }

    #[test]
    fn init_bimodal() {
        let s = bimodal(2, 3);
        assert_eq!(s.get(Domain::Text, Domain::Text).unwrap(), &Tensor::eye(2));
        assert_eq!(s.get(Domain::Image, Domain::Image).unwrap(), &Tensor::eye(3));
        assert_eq!(s.get(Domain::Text, Domain::Image).unwrap(), &Tensor::zeros(&[2, 3]));
        assert_eq!(s.get(Domain::Image, Domain::Text).unwrap(), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn init_encoder_decoder_has_no_reverse_map() {
        let s = init_state(
            Architecture::EncoderDecoder,
            TokenCounts::EncoderDecoder { encoder: 4, decoder: 2 },
        )
        .unwrap();
        assert_eq!(s.get(Domain::Encoder, Domain::Encoder).unwrap(), &Tensor::eye(4));
        assert_eq!(s.get(Domain::Decoder, Domain::Decoder).unwrap(), &Tensor::eye(2));
        assert_eq!(s.get(Domain::Decoder, Domain::Encoder).unwrap(), &Tensor::zeros(&[2, 4]));
        assert!(s.get(Domain::Encoder, Domain::Decoder).is_none());
    }

    #[test]
    fn init_pure_self_is_joint_identity() {
        let s = init_state(Architecture::PureSelf, TokenCounts::Bimodal { text: 2, image: 3 }).unwrap();
        assert_eq!(s.get(Domain::Joint, Domain::Joint).unwrap(), &Tensor::eye(5));
        assert_eq!(s.named_maps().len(), 1);
    }

    #[test]
    fn init_rejects_zero_counts() {
        assert!(init_state(Architecture::SelfPlusCo, TokenCounts::Bimodal { text: 0, image: 3 }).is_err());
        assert!(init_state(Architecture::PureSelf, TokenCounts::EncoderDecoder { encoder: 1, decoder: 1 }).is_err());
    }

    #[test]
    fn head_average_clamps_negative_contributions() {
        let a = Tensor::from_vec(vec![1, 2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        let g = a.map(|_| -3.0);
        assert_eq!(head_average(&a, Some(&g)).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn head_average_single_head() {
        let a = Tensor::from_vec(vec![1, 1, 1], vec![0.5]).unwrap();
        let g = Tensor::from_vec(vec![1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(head_average(&a, Some(&g)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn head_average_two_heads_mean() {
        let a = Tensor::from_vec(vec![2, 1, 1], vec![0.5, 0.25]).unwrap();
        let g = Tensor::from_vec(vec![2, 1, 1], vec![2.0, -4.0]).unwrap();
        assert_eq!(head_average(&a, Some(&g)).unwrap().data(), &[0.5]);
    }

    #[test]
    fn head_average_without_gradient_is_an_order_error() {
        let a = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(head_average(&a, None), Err(Error::PropagationOrder(_))));
    }

    #[test]
    fn first_self_layer_adds_abar() {
        let mut s = bimodal(2, 2);
        let abar = m(&[&[0.2, 0.1], &[0.0, 0.3]]);
        apply_self(&mut s, &abar, Domain::Text, AblationVariant::Full).unwrap();
        let expect = Tensor::eye(2).add(&abar).unwrap();
        assert_eq!(s.get(Domain::Text, Domain::Text).unwrap(), &expect);
        assert_eq!(s.get(Domain::Text, Domain::Image).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn zero_abar_leaves_state_unchanged() {
        let mut s = bimodal(2, 3);
        s.put(Domain::Text, Domain::Image, Tensor::filled(&[2, 3], 0.4));
        let before = s.clone();
        apply_self(&mut s, &Tensor::zeros(&[2, 2]), Domain::Text, AblationVariant::Full).unwrap();
        apply_cross(&mut s, &Tensor::zeros(&[2, 3]), Domain::Text, Domain::Image, AblationVariant::Full).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn two_self_layers_expand_to_product() {
        let a1 = m(&[&[0.1, 0.4], &[0.2, 0.0]]);
        let a2 = m(&[&[0.3, 0.0], &[0.5, 0.1]]);
        let mut s = bimodal(2, 1);
        apply_self(&mut s, &a1, Domain::Text, AblationVariant::Full).unwrap();
        apply_self(&mut s, &a2, Domain::Text, AblationVariant::Full).unwrap();
        // I + A1 + A2 + A2·A1, written out by hand
        let a2a1 = [
            [0.3 * 0.1, 0.3 * 0.4],
            [0.5 * 0.1 + 0.1 * 0.2, 0.5 * 0.4],
        ];
        let expect = m(&[
            &[1.0 + 0.1 + 0.3 + a2a1[0][0], 0.4 + a2a1[0][1]],
            &[0.2 + 0.5 + a2a1[1][0], 1.0 + 0.1 + a2a1[1][1]],
        ]);
        assert!(s.get(Domain::Text, Domain::Text).unwrap().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn normalize_identity_is_identity() {
        assert_eq!(normalize_self(&Tensor::eye(3)), Tensor::eye(3));
    }

    #[test]
    fn normalize_hand_example() {
        let r = m(&[&[1.2, 0.2], &[0.0, 1.0]]);
        let n = normalize_self(&r);
        let expect = m(&[&[1.5, 0.5], &[0.0, 1.0]]);
        assert!(n.max_abs_diff(&expect) < 1e-12);
        assert!((n.row(0).iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_cross_layer_adds_abar() {
        let mut s = bimodal(2, 3);
        let abar = m(&[&[0.1, 0.0, 0.2], &[0.3, 0.3, 0.0]]);
        apply_cross(&mut s, &abar, Domain::Text, Domain::Image, AblationVariant::Full).unwrap();
        assert_eq!(s.get(Domain::Text, Domain::Image).unwrap(), &abar);
        // R^it is still zero, so the self map is untouched
        assert_eq!(s.get(Domain::Text, Domain::Text).unwrap(), &Tensor::eye(2));
    }

    #[test]
    fn cross_without_self_attention_differs_only_after_self_layers() {
        let abar = m(&[&[0.1, 0.4], &[0.3, 0.2]]);
        let run = |variant, with_self: bool| {
            let mut s = bimodal(2, 2);
            if with_self {
                apply_self(&mut s, &m(&[&[0.2, 0.6], &[0.0, 0.1]]), Domain::Text, variant).unwrap();
            }
            apply_cross(&mut s, &abar, Domain::Text, Domain::Image, variant).unwrap();
            s
        };
        assert_eq!(
            run(AblationVariant::Full, false),
            run(AblationVariant::NoSelfAttInCross, false)
        );
        assert!(
            run(AblationVariant::Full, true).max_abs_diff(&run(AblationVariant::NoSelfAttInCross, true)) > 1e-3
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = bimodal(2, 3);
        assert!(apply_self(&mut s, &Tensor::zeros(&[3, 3]), Domain::Text, AblationVariant::Full).is_err());
        assert!(apply_cross(&mut s, &Tensor::zeros(&[3, 2]), Domain::Text, Domain::Image, AblationVariant::Full).is_err());
        assert!(apply_self(&mut s, &Tensor::zeros(&[2, 2]), Domain::Encoder, AblationVariant::Full).is_err());
    }

    #[test]
    fn extraction_from_init_state() {
        let s = bimodal(3, 2);
        let (t, i) = extract_cls(&s, 0).unwrap();
        assert_eq!(t, vec![0.0; 3]);
        assert_eq!(i, vec![0.0; 2]);
        assert!(extract_cls(&s, 3).is_err());
        let ed = init_state(
            Architecture::EncoderDecoder,
            TokenCounts::EncoderDecoder { encoder: 4, decoder: 2 },
        )
        .unwrap();
        assert_eq!(extract_query(&ed, 1).unwrap(), vec![0.0; 4]);
        assert!(extract_query(&ed, 2).is_err());
        assert!(extract_cls(&ed, 0).is_err());
        assert!(extract_query(&s, 0).is_err());
    }

    #[test]
    fn cls_image_scores_after_one_cross_layer() {
        let mut s = bimodal(2, 3);
        let abar = m(&[&[0.1, 0.7, 0.2], &[0.3, 0.3, 0.0]]);
        apply_cross(&mut s, &abar, Domain::Text, Domain::Image, AblationVariant::Full).unwrap();
        let (_, image) = extract_cls(&s, 0).unwrap();
        assert_eq!(image, abar.row(0));
    }

    #[test]
    fn query_scores_after_one_decoder_cross_layer() {
        let mut s = init_state(
            Architecture::EncoderDecoder,
            TokenCounts::EncoderDecoder { encoder: 3, decoder: 2 },
        )
        .unwrap();
        let abar = m(&[&[0.1, 0.7, 0.2], &[0.3, 0.3, 0.0]]);
        apply_cross(&mut s, &abar, Domain::Decoder, Domain::Encoder, AblationVariant::Full).unwrap();
        assert_eq!(extract_query(&s, 1).unwrap(), abar.row(1));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("nope".parse::<AblationVariant>().is_err());
    }
}
