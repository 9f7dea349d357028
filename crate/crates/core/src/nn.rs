//! Dense tensors and the two grouped models (multinomial logistic regression
//! and a one-hidden-layer ReLU MLP) with hand-written backpropagation.
//!
//! A model's parameters live in one flat vector. A [`GroupLayout`] partitions
//! the indices into prunable groups (hidden units or input features) and an
//! ungrouped remainder. Gate masks act per group: every coordinate of group
//! `g` is multiplied by `mask[g]` before the forward pass.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::scalar::Scalar;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedError::shape(
                "matrix data",
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FedError::NonFinite {
                what: "matrix entry",
                provenance: Default::default(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn cast<T: Scalar>(&self) -> DenseMatrix<T> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| T::of(x.as_f64())).collect(),
        }
    }
}

/// Inputs plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub inputs: DenseMatrix<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(inputs: DenseMatrix<S>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(FedError::InvalidArgument("batch must hold at least one example".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(FedError::shape("batch labels", inputs.rows(), labels.len()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Batch<T> {
        Batch {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// One prunable structure. `ranges` may be non-contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub id: usize,
    pub ranges: Vec<Range<usize>>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

/// Partition of a flat parameter vector into groups and an ungrouped rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    len: usize,
    groups: Vec<Group>,
    ungrouped: Vec<Range<usize>>,
    /// Group owning each coordinate, `None` for ungrouped ones.
    owner: Vec<Option<usize>>,
}

impl GroupLayout {
    pub fn new(len: usize, groups: Vec<Group>, ungrouped: Vec<Range<usize>>) -> Result<Self> {
        let mut owner: Vec<Option<Option<usize>>> = vec![None; len];
        let mut claim = |i: usize, who: Option<usize>| -> Result<()> {
            match owner.get_mut(i) {
                None => Err(FedError::shape("group index", format!("< {len}"), i)),
                Some(slot @ None) => {
                    *slot = Some(who);
                    Ok(())
                }
                Some(Some(_)) => Err(FedError::Consistency(format!(
                    "parameter index {i} belongs to more than one group"
                ))),
            }
        };
        for (g, group) in groups.iter().enumerate() {
            for i in group.indices() {
                claim(i, Some(g))?;
            }
        }
        for r in &ungrouped {
            for i in r.clone() {
                claim(i, None)?;
            }
        }
        let owner = owner
            .into_iter()
            .enumerate()
            .map(|(i, o)| {
                o.ok_or_else(|| {
                    FedError::Consistency(format!("parameter index {i} is neither grouped nor ungrouped"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupLayout {
            len,
            groups,
            ungrouped,
            owner,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &Group {
        &self.groups[g]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Group::size).collect()
    }

    pub fn ungrouped(&self) -> &[Range<usize>] {
        &self.ungrouped
    }

    pub fn ungrouped_len(&self) -> usize {
        self.ungrouped.iter().map(|r| r.len()).sum()
    }

    pub fn owner(&self, i: usize) -> Option<usize> {
        self.owner[i]
    }

    /// Per-coordinate multipliers for a per-group mask (ungrouped get 1).
    pub fn expand<S: Scalar>(&self, mask: &[S]) -> Vec<S> {
        self.owner
            .iter()
            .map(|o| o.map_or(S::one(), |g| mask[g]))
            .collect()
    }

    fn check_mask<S>(&self, mask: &[S]) -> Result<()> {
        if mask.len() != self.groups.len() {
            return Err(FedError::shape("group mask", self.groups.len(), mask.len()));
        }
        Ok(())
    }
}

/// Flat parameters bound to their group layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedParams<S> {
    pub flat: Vec<S>,
    layout: Arc<GroupLayout>,
}

impl<S: Scalar> GroupedParams<S> {
    pub fn new(flat: Vec<S>, layout: Arc<GroupLayout>) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(FedError::shape("parameter vector", layout.len(), flat.len()));
        }
        Ok(GroupedParams { flat, layout })
    }

    pub fn zeros(layout: Arc<GroupLayout>) -> Self {
        GroupedParams {
            flat: vec![S::zero(); layout.len()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Same layout, new values.
    pub fn with_flat(&self, flat: Vec<S>) -> Result<Self> {
        GroupedParams::new(flat, self.layout.clone())
    }

    pub fn zero_group(&mut self, g: usize) {
        for i in self.layout.groups[g].indices() {
            self.flat[i] = S::zero();
        }
    }

    /// Multiply each group by its mask entry; ungrouped coordinates untouched.
    pub fn apply_mask(&mut self, mask: &[S]) -> Result<()> {
        self.layout.check_mask(mask)?;
        for (g, group) in self.layout.groups.iter().enumerate() {
            for i in group.indices() {
                self.flat[i] *= mask[g];
            }
        }
        Ok(())
    }

    /// Values of the kept groups in group order, followed by all ungrouped
    /// coordinates.
    pub fn gather(&self, keep: &[bool]) -> Result<Vec<S>> {
        self.layout.check_mask(keep)?;
        let mut out = Vec::new();
        for (group, _) in self.layout.groups.iter().zip(keep).filter(|(_, &k)| k) {
            out.extend(group.indices().map(|i| self.flat[i]));
        }
        for r in &self.layout.ungrouped {
            out.extend_from_slice(&self.flat[r.clone()]);
        }
        Ok(out)
    }

    /// Inverse of [`GroupedParams::gather`]: dropped groups are set to zero.
    pub fn scatter(layout: Arc<GroupLayout>, keep: &[bool], values: &[S]) -> Result<Self> {
        layout.check_mask(keep)?;
        let expected: usize = layout
            .groups
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(g, _)| g.size())
            .sum::<usize>()
            + layout.ungrouped_len();
        if values.len() != expected {
            return Err(FedError::shape("surviving weights", expected, values.len()));
        }
        let mut flat = vec![S::zero(); layout.len()];
        let mut it = values.iter();
        for (group, _) in layout.groups.iter().zip(keep).filter(|(_, &k)| k) {
            for i in group.indices() {
                flat[i] = *it.next().expect("length checked");
            }
        }
        for r in &layout.ungrouped {
            for i in r.clone() {
                flat[i] = *it.next().expect("length checked");
            }
        }
        Ok(GroupedParams { flat, layout })
    }

    pub fn cast<T: Scalar>(&self) -> GroupedParams<T> {
        GroupedParams {
            flat: self.flat.iter().map(|&x| T::of(x.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Per-group L2 norms.
pub fn group_norms<S: Scalar>(params: &GroupedParams<S>) -> Vec<S> {
    params
        .layout
        .groups
        .iter()
        .map(|g| g.indices().map(|i| params.flat[i] * params.flat[i]).sum::<S>().sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerHiddenUnit,
    PerInputFeature,
}

/// Architecture and grouping of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub grouping: Grouping,
    /// Also gate output units (class rows of the last layer plus bias).
    #[serde(default)]
    pub group_output: bool,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logreg,
            input_dim,
            hidden_dim: 0,
            num_classes,
            grouping: Grouping::PerInputFeature,
            group_output: false,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            grouping: Grouping::PerHiddenUnit,
            group_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(FedError::InvalidArgument(
                "model needs input_dim >= 1 and num_classes >= 2".into(),
            ));
        }
        match self.kind {
            ModelKind::Mlp if self.hidden_dim == 0 => Err(FedError::InvalidArgument(
                "mlp needs hidden_dim >= 1".into(),
            )),
            ModelKind::Logreg if self.grouping == Grouping::PerHiddenUnit => Err(
                FedError::InvalidArgument("logreg has no hidden units; use per_input_feature grouping".into()),
            ),
            _ => Ok(()),
        }
    }

    fn hidden(&self) -> usize {
        match self.kind {
            ModelKind::Logreg => 0,
            ModelKind::Mlp => self.hidden_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden(), self.num_classes);
        match self.kind {
            ModelKind::Logreg => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    /// Width of the layer feeding the output layer.
    fn penultimate(&self) -> usize {
        match self.kind {
            ModelKind::Logreg => self.input_dim,
            ModelKind::Mlp => self.hidden_dim,
        }
    }

    /// Offset of the output weight matrix (`num_classes × penultimate`).
    fn out_w(&self) -> usize {
        match self.kind {
            ModelKind::Logreg => 0,
            ModelKind::Mlp => self.hidden_dim * self.input_dim + self.hidden_dim,
        }
    }

    fn out_b(&self) -> usize {
        self.out_w() + self.num_classes * self.penultimate()
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        self.validate()?;
        let (d, h, c) = (self.input_dim, self.hidden(), self.num_classes);
        let n = self.param_count();
        let mut groups = Vec::new();
        let mut grouped = vec![false; n];
        let mut push = |ranges: Vec<Range<usize>>, grouped: &mut Vec<bool>| {
            for r in &ranges {
                for i in r.clone() {
                    grouped[i] = true;
                }
            }
            let id = groups.len();
            groups.push(Group { id, ranges });
        };
        match (self.kind, self.grouping) {
            (ModelKind::Mlp, Grouping::PerHiddenUnit) => {
                for k in 0..h {
                    push(vec![k * d..(k + 1) * d, h * d + k..h * d + k + 1], &mut grouped);
                }
            }
            (ModelKind::Mlp, Grouping::PerInputFeature) => {
                for i in 0..d {
                    push((0..h).map(|k| k * d + i..k * d + i + 1).collect(), &mut grouped);
                }
            }
            (ModelKind::Logreg, Grouping::PerInputFeature) => {
                for i in 0..d {
                    push((0..c).map(|k| k * d + i..k * d + i + 1).collect(), &mut grouped);
                }
            }
            (ModelKind::Logreg, Grouping::PerHiddenUnit) => unreachable!("rejected by validate"),
        }
        if self.group_output {
            let (w, b, p) = (self.out_w(), self.out_b(), self.penultimate());
            for k in 0..c {
                let row = w + k * p..w + (k + 1) * p;
                if row.clone().any(|i| grouped[i]) {
                    return Err(FedError::InvalidArgument(
                        "group_output overlaps the input-feature groups of a logreg model".into(),
                    ));
                }
                push(vec![row, b + k..b + k + 1], &mut grouped);
            }
        }
        let mut ungrouped = Vec::new();
        let mut i = 0;
        while i < n {
            if grouped[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && !grouped[i] {
                i += 1;
            }
            ungrouped.push(start..i);
        }
        GroupLayout::new(n, groups, ungrouped)
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(
        &self,
        layout: Arc<GroupLayout>,
        rng: &mut R,
    ) -> Result<GroupedParams<S>> {
        let (d, h, c) = (self.input_dim, self.hidden(), self.num_classes);
        let mut flat = vec![S::zero(); self.param_count()];
        let mut fill = |range: Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut flat[range] {
                *x = S::of(rng.random_range(-bound..bound));
            }
        };
        match self.kind {
            ModelKind::Logreg => fill(0..c * d, d),
            ModelKind::Mlp => {
                fill(0..h * d, d);
                fill(self.out_w()..self.out_w() + c * h, h);
            }
        }
        GroupedParams::new(flat, layout)
    }

    fn check(&self, params_len: usize, batch_cols: usize, labels: &[usize]) -> Result<()> {
        if params_len != self.param_count() {
            return Err(FedError::shape("parameter vector", self.param_count(), params_len));
        }
        if batch_cols != self.input_dim {
            return Err(FedError::shape(
                "batch inputs",
                format!("n x {}", self.input_dim),
                format!("n x {batch_cols}"),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(FedError::shape("label", format!("< {}", self.num_classes), bad));
        }
        Ok(())
    }
}

/// Intermediate values kept from the forward pass for backprop.
struct Activations<S> {
    /// Hidden pre-activations (`n × hidden`), empty for logreg.
    hidden_pre: Vec<S>,
    /// Input to the output layer (`n × penultimate`).
    penultimate: Vec<S>,
    logits: Vec<S>,
}

fn run_forward<S: Scalar>(spec: &ModelSpec, p: &[S], x: &DenseMatrix<S>) -> Activations<S> {
    let n = x.rows();
    let (d, c) = (spec.input_dim, spec.num_classes);
    let (hidden_pre, penultimate) = match spec.kind {
        ModelKind::Logreg => (Vec::new(), x.data().to_vec()),
        ModelKind::Mlp => {
            let h = spec.hidden_dim;
            let (w1, b1) = (&p[..h * d], &p[h * d..h * d + h]);
            let mut pre = vec![S::zero(); n * h];
            for r in 0..n {
                let xr = x.row(r);
                for k in 0..h {
                    let w = &w1[k * d..(k + 1) * d];
                    let mut acc = b1[k];
                    for (a, b) in w.iter().zip(xr) {
                        acc += *a * *b;
                    }
                    pre[r * h + k] = acc;
                }
            }
            let act = pre.iter().map(|&z| z.max(S::zero())).collect();
            (pre, act)
        }
    };
    let m = spec.penultimate();
    let (w, b) = (spec.out_w(), spec.out_b());
    let mut logits = vec![S::zero(); n * c];
    for r in 0..n {
        let a = &penultimate[r * m..(r + 1) * m];
        for k in 0..c {
            let row = &p[w + k * m..w + (k + 1) * m];
            let mut acc = p[b + k];
            for (u, v) in row.iter().zip(a) {
                acc += *u * *v;
            }
            logits[r * c + k] = acc;
        }
    }
    Activations {
        hidden_pre,
        penultimate,
        logits,
    }
}

/// Mean softmax cross-entropy and, when requested, `∂loss/∂logits`.
fn cross_entropy<S: Scalar>(logits: &[S], labels: &[usize], c: usize, want_grad: bool) -> (S, Vec<S>) {
    let n = labels.len();
    let inv_n = S::one() / S::of_usize(n);
    let mut total = S::zero();
    let mut dlogits = if want_grad { vec![S::zero(); n * c] } else { Vec::new() };
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        if want_grad {
            for k in 0..c {
                let p = (row[k] - lse).exp();
                let t = if k == y { S::one() } else { S::zero() };
                dlogits[r * c + k] = (p - t) * inv_n;
            }
        }
    }
    (total * inv_n, dlogits)
}

fn effective<'a, S: Scalar>(
    params: &'a GroupedParams<S>,
    mask: Option<&[S]>,
) -> Result<std::borrow::Cow<'a, [S]>> {
    match mask {
        None => Ok(std::borrow::Cow::Borrowed(&params.flat)),
        Some(m) => {
            params.layout.check_mask(m)?;
            let scale = params.layout.expand(m);
            Ok(std::borrow::Cow::Owned(
                params.flat.iter().zip(&scale).map(|(&p, &s)| p * s).collect(),
            ))
        }
    }
}

/// Mean cross-entropy and logits of the (optionally gate-masked) model.
pub fn forward<S: Scalar>(
    spec: &ModelSpec,
    params: &GroupedParams<S>,
    batch: &Batch<S>,
    mask: Option<&[S]>,
) -> Result<(S, DenseMatrix<S>)> {
    spec.check(params.len(), batch.inputs.cols(), &batch.labels)?;
    let p = effective(params, mask)?;
    let act = run_forward(spec, &p, &batch.inputs);
    let (loss, _) = cross_entropy(&act.logits, &batch.labels, spec.num_classes, false);
    let logits = DenseMatrix::new(batch.len(), spec.num_classes, act.logits)?;
    Ok((loss, logits))
}

/// Loss with gradients w.r.t. the raw parameters and the group mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<S> {
    pub loss: S,
    pub params: Vec<S>,
    /// `∂loss/∂mask[g]`; present only when a mask was supplied.
    pub mask: Option<Vec<S>>,
}

pub fn loss_and_grad<S: Scalar>(
    spec: &ModelSpec,
    params: &GroupedParams<S>,
    batch: &Batch<S>,
    mask: Option<&[S]>,
) -> Result<LossGrad<S>> {
    spec.check(params.len(), batch.inputs.cols(), &batch.labels)?;
    let p = effective(params, mask)?;
    let act = run_forward(spec, &p, &batch.inputs);
    let (loss, dlogits) = cross_entropy(&act.logits, &batch.labels, spec.num_classes, true);

    let n = batch.len();
    let (d, c, m) = (spec.input_dim, spec.num_classes, spec.penultimate());
    let (w, b) = (spec.out_w(), spec.out_b());
    let mut g = vec![S::zero(); p.len()];

    for r in 0..n {
        let a = &act.penultimate[r * m..(r + 1) * m];
        for k in 0..c {
            let dz = dlogits[r * c + k];
            g[b + k] += dz;
            for (gi, &ai) in g[w + k * m..w + (k + 1) * m].iter_mut().zip(a) {
                *gi += dz * ai;
            }
        }
    }

    if spec.kind == ModelKind::Mlp {
        let h = spec.hidden_dim;
        for r in 0..n {
            let xr = batch.inputs.row(r);
            for j in 0..h {
                if act.hidden_pre[r * h + j] <= S::zero() {
                    continue;
                }
                let mut dh = S::zero();
                for k in 0..c {
                    dh += dlogits[r * c + k] * p[w + k * m + j];
                }
                g[h * d + j] += dh;
                for (gi, &xi) in g[j * d..(j + 1) * d].iter_mut().zip(xr) {
                    *gi += dh * xi;
                }
            }
        }
    }

    let mask_grad = match mask {
        None => None,
        Some(mk) => {
            let mut mg = vec![S::zero(); mk.len()];
            for (grp, out) in params.layout.groups.iter().zip(mg.iter_mut()) {
                *out = grp.indices().map(|i| g[i] * params.flat[i]).sum();
            }
            let scale = params.layout.expand(mk);
            for (gi, s) in g.iter_mut().zip(scale) {
                *gi *= s;
            }
            Some(mg)
        }
    };

    Ok(LossGrad {
        loss,
        params: g,
        mask: mask_grad,
    })
}

/// Gradient of the masked mean cross-entropy w.r.t. the parameters.
pub fn backward<S: Scalar>(
    spec: &ModelSpec,
    params: &GroupedParams<S>,
    batch: &Batch<S>,
    mask: Option<&[S]>,
) -> Result<Vec<S>> {
    loss_and_grad(spec, params, batch, mask).map(|lg| lg.params)
}

/// Argmax class per row; ties go to the lowest class id.
pub fn predict<S: Scalar>(
    spec: &ModelSpec,
    params: &GroupedParams<S>,
    inputs: &DenseMatrix<S>,
    mask: Option<&[S]>,
) -> Result<Vec<usize>> {
    spec.check(params.len(), inputs.cols(), &[])?;
    let p = effective(params, mask)?;
    let act = run_forward(spec, &p, inputs);
    Ok(argmax_rows(&act.logits, spec.num_classes))
}

/// Row-wise softmax probabilities, used for ensemble prediction.
pub fn predict_proba<S: Scalar>(
    spec: &ModelSpec,
    params: &GroupedParams<S>,
    inputs: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    spec.check(params.len(), inputs.cols(), &[])?;
    let act = run_forward(spec, &params.flat, inputs);
    let c = spec.num_classes;
    let mut probs = act.logits;
    for row in probs.chunks_mut(c) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in row.iter_mut() {
            *z /= sum;
        }
    }
    DenseMatrix::new(inputs.rows(), c, probs)
}

pub fn argmax_rows<S: Scalar>(values: &[S], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
