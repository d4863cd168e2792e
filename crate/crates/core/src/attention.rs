//! Self-attention algebra and the attention-control machinery: feature
//! recording during inversion, dual attention-guided color transfer, layout
//! injection, and the single-attention and pre-softmax ablation maps.
//!
//! Features are `M x d` matrices (flattened spatial positions by channels).
//! Multi-head sites split the projected channels into equal head slices and
//! every map is built per head.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::AttentionSite;
use crate::error::{Error, Result};

fn check_nonempty(context: &'static str, m: &ArrayView2<f32>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidDimensions(format!(
            "{context}: empty feature matrix {:?}",
            m.dim()
        )));
    }
    Ok(())
}

fn check_same(context: &'static str, a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            &[a.nrows(), a.ncols()],
            &[b.nrows(), b.ncols()],
        ));
    }
    Ok(())
}

/// Scaled dot-product similarity `q k^T / sqrt(d)`.
pub fn similarity(q: ArrayView2<f32>, k: ArrayView2<f32>) -> Result<Array2<f32>> {
    check_nonempty("similarity query", &q)?;
    check_nonempty("similarity key", &k)?;
    if q.ncols() != k.ncols() {
        return Err(Error::shape("similarity", &[k.nrows(), q.ncols()], &[k.nrows(), k.ncols()]));
    }
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut s = q.dot(&k.t());
    s.mapv_inplace(|v| v * scale);
    Ok(s)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(mut logits: Array2<f32>) -> Array2<f32> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        row.mapv_inplace(|v| (v as f64 / sum) as f32);
    }
    logits
}

/// `softmax(q k^T / sqrt(d))`.
pub fn attention_map(q: ArrayView2<f32>, k: ArrayView2<f32>) -> Result<Array2<f32>> {
    Ok(softmax_rows(similarity(q, k)?))
}

/// Single-head self-attention: project `phi` with `wq`, `wk`, `wv`, then
/// aggregate values with the softmax map.
pub fn attention_forward(
    phi: ArrayView2<f32>,
    wq: ArrayView2<f32>,
    wk: ArrayView2<f32>,
    wv: ArrayView2<f32>,
) -> Result<Array2<f32>> {
    check_nonempty("attention input", &phi)?;
    for w in [&wq, &wk, &wv] {
        if w.nrows() != phi.ncols() {
            return Err(Error::shape(
                "attention projection",
                &[phi.ncols(), w.ncols()],
                &[w.nrows(), w.ncols()],
            ));
        }
    }
    let q = phi.dot(&wq);
    let k = phi.dot(&wk);
    let v = phi.dot(&wv);
    let a = attention_map(q.view(), k.view())?;
    Ok(a.dot(&v))
}

/// `softmax(S_g2g * gamma + S_c2c * (1 - gamma))` with
/// `S_g2g = q_in k_refL^T / sqrt(d)` and `S_c2c = q_out k_ref^T / sqrt(d)`.
/// A term whose weight is exactly zero is not evaluated.
pub fn dual_attention_map(
    q_in: ArrayView2<f32>,
    k_ref_l: ArrayView2<f32>,
    q_out: ArrayView2<f32>,
    k_ref: ArrayView2<f32>,
    gamma: f32,
) -> Result<Array2<f32>> {
    check_unit("gamma", gamma)?;
    check_same("dual attention queries", &q_in, &q_out)?;
    check_same("dual attention keys", &k_ref_l, &k_ref)?;
    let logits = if gamma == 1.0 {
        similarity(q_in, k_ref_l)?
    } else if gamma == 0.0 {
        similarity(q_out, k_ref)?
    } else {
        let mut g2g = similarity(q_in, k_ref_l)?;
        let c2c = similarity(q_out, k_ref)?;
        g2g.zip_mut_with(&c2c, |a, &b| *a = *a * gamma + b * (1.0 - gamma));
        g2g
    };
    Ok(softmax_rows(logits))
}

/// Gray-to-color single attention: `softmax(q_in k_ref^T / sqrt(d))`.
pub fn g2c_attention_map(q_in: ArrayView2<f32>, k_ref: ArrayView2<f32>) -> Result<Array2<f32>> {
    attention_map(q_in, k_ref)
}

/// Combination after the softmax:
/// `softmax(S_g2g) * gamma + softmax(S_c2c) * (1 - gamma)`.
pub fn presoftmax_dual_map(
    q_in: ArrayView2<f32>,
    k_ref_l: ArrayView2<f32>,
    q_out: ArrayView2<f32>,
    k_ref: ArrayView2<f32>,
    gamma: f32,
) -> Result<Array2<f32>> {
    check_unit("gamma", gamma)?;
    check_same("presoftmax queries", &q_in, &q_out)?;
    check_same("presoftmax keys", &k_ref_l, &k_ref)?;
    if gamma == 1.0 {
        return attention_map(q_in, k_ref_l);
    }
    if gamma == 0.0 {
        return attention_map(q_out, k_ref);
    }
    let mut a = attention_map(q_in, k_ref_l)?;
    let b = attention_map(q_out, k_ref)?;
    a.zip_mut_with(&b, |x, &y| *x = *x * gamma + y * (1.0 - gamma));
    Ok(a)
}

/// `A_dual v_ref * (1 - beta) + A_in v_out * beta`.
pub fn transfer_output(
    a_dual: ArrayView2<f32>,
    v_ref: ArrayView2<f32>,
    a_in: ArrayView2<f32>,
    v_out: ArrayView2<f32>,
    beta: f32,
) -> Result<Array2<f32>> {
    check_unit("beta", beta)?;
    if a_dual.ncols() != v_ref.nrows() {
        return Err(Error::shape("transfer value rows", &[a_dual.ncols()], &[v_ref.nrows()]));
    }
    if a_in.ncols() != v_out.nrows() {
        return Err(Error::shape("injection value rows", &[a_in.ncols()], &[v_out.nrows()]));
    }
    let mut out = a_dual.dot(&v_ref);
    let injected = a_in.dot(&v_out);
    if out.dim() != injected.dim() {
        return Err(Error::shape(
            "transfer output",
            &[out.nrows(), out.ncols()],
            &[injected.nrows(), injected.ncols()],
        ));
    }
    out.zip_mut_with(&injected, |o, &i| *o = *o * (1.0 - beta) + i * beta);
    Ok(out)
}

fn check_unit(name: &'static str, v: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidConfig(format!("{name}={v} outside [0, 1]")));
    }
    Ok(())
}

/// Projection weights of one self-attention site, laid out so that
/// `q = phi . wq` (input channels by output channels).
#[derive(Debug, Clone, Copy)]
pub struct Projections<'a> {
    pub wq: ArrayView2<'a, f32>,
    pub wk: ArrayView2<'a, f32>,
    pub wv: ArrayView2<'a, f32>,
    pub heads: usize,
}

impl Projections<'_> {
    fn check(&self, phi: &ArrayView2<f32>) -> Result<()> {
        check_nonempty("site input", phi)?;
        let inner = self.wq.ncols();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.nrows() != phi.ncols() || w.ncols() != inner {
                return Err(Error::shape(
                    "site projection",
                    &[phi.ncols(), inner],
                    &[w.nrows(), w.ncols()],
                ));
            }
        }
        if self.heads == 0 || !inner.is_multiple_of(self.heads) {
            return Err(Error::InvalidDimensions(format!(
                "{inner} projected channels do not split into {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

fn split_heads(x: &Array2<f32>, heads: usize) -> Vec<Array2<f32>> {
    let dh = x.ncols() / heads;
    (0..heads)
        .map(|h| x.slice(s![.., h * dh..(h + 1) * dh]).to_owned())
        .collect()
}

fn merge_heads(parts: &[Array2<f32>]) -> Result<Array2<f32>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::InvalidDimensions(e.to_string()))
}

/// Which image's inversion a recorded feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Input,
    Ref,
    #[serde(rename = "refl")]
    RefL,
    Out,
}

impl Stream {
    /// Components (q, k, v) this stream must record.
    fn components(self) -> (bool, bool, bool) {
        match self {
            Stream::Input => (true, true, false),
            Stream::RefL => (false, true, false),
            Stream::Ref => (false, true, true),
            Stream::Out => (true, true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    pub round: usize,
    pub timestep: usize,
    pub layer: usize,
    pub stream: Stream,
}

/// Per-head query/key/value features recorded at one site.
#[derive(Debug, Clone, Default)]
pub struct FeatureRecord {
    pub q: Option<Vec<Array2<f32>>>,
    pub k: Option<Vec<Array2<f32>>>,
    pub v: Option<Vec<Array2<f32>>>,
}

impl FeatureRecord {
    pub fn positions(&self) -> Option<usize> {
        [&self.q, &self.k, &self.v]
            .into_iter()
            .flatten()
            .next()
            .and_then(|heads| heads.first())
            .map(|m| m.nrows())
    }
}

/// Write-once store of recorded features keyed by
/// (round, timestep, layer, stream).
#[derive(Debug, Default)]
pub struct AttentionFeatureCache {
    entries: HashMap<FeatureKey, FeatureRecord>,
    frozen: bool,
}

impl AttentionFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: FeatureKey, record: FeatureRecord) -> Result<()> {
        if self.frozen {
            return Err(Error::CacheFrozen);
        }
        if self.entries.contains_key(&key) {
            return Err(Error::CacheOverwrite {
                round: key.round,
                timestep: key.timestep,
                layer: key.layer,
                stream: key.stream,
            });
        }
        self.entries.insert(key, record);
        Ok(())
    }

    pub fn get(&self, key: &FeatureKey) -> Result<&FeatureRecord> {
        self.entries.get(key).ok_or(Error::CacheMiss {
            round: key.round,
            timestep: key.timestep,
            layer: key.layer,
            stream: key.stream,
        })
    }

    /// Ends the recording phase; later inserts fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FeatureKey> {
        self.entries.keys()
    }
}

/// Per-site attention behavior for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "stream")]
pub enum SiteMode {
    /// Ordinary self-attention.
    Plain,
    /// Ordinary self-attention, recording this stream's features.
    Record(Stream),
    DualTransfer,
    G2gOnly,
    C2cOnly,
    G2cOnly,
    PresoftmaxDual,
}

impl SiteMode {
    pub fn is_transfer(self) -> bool {
        !matches!(self, SiteMode::Plain | SiteMode::Record(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteDirective {
    pub mode: SiteMode,
    pub gamma: f32,
    pub beta: f32,
}

impl SiteDirective {
    pub const PLAIN: SiteDirective = SiteDirective {
        mode: SiteMode::Plain,
        gamma: 1.0,
        beta: 0.0,
    };
}

/// Attention behavior of every site for one forward pass. Sites without an
/// entry run plain self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDirectives {
    /// Round whose recorded features are read or written.
    pub round: usize,
    /// DDIM step index used as the cache key.
    pub timestep: usize,
    sites: BTreeMap<usize, SiteDirective>,
}

impl AttentionDirectives {
    pub fn plain(timestep: usize) -> Self {
        Self {
            round: 1,
            timestep,
            sites: BTreeMap::new(),
        }
    }

    pub fn new(round: usize, timestep: usize) -> Self {
        Self {
            round,
            timestep,
            sites: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, layer: usize, directive: SiteDirective) -> Result<()> {
        check_unit("gamma", directive.gamma)?;
        check_unit("beta", directive.beta)?;
        self.sites.insert(layer, directive);
        Ok(())
    }

    pub fn with(mut self, layer: usize, directive: SiteDirective) -> Result<Self> {
        self.set(layer, directive)?;
        Ok(self)
    }

    pub fn get(&self, layer: usize) -> SiteDirective {
        self.sites.get(&layer).copied().unwrap_or(SiteDirective::PLAIN)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.sites.keys().copied()
    }

    pub fn is_plain(&self) -> bool {
        self.sites.values().all(|d| d.mode == SiteMode::Plain)
    }

    /// Fails if a directive names a layer the backend does not have.
    pub fn validate(&self, sites: &[AttentionSite]) -> Result<()> {
        for layer in self.layers() {
            if !sites.iter().any(|s| s.id.layer_index == layer) {
                return Err(Error::UnknownSite(layer));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    SelfAttention,
    Dual,
    GrayToGray,
    ColorToColor,
    GrayToColor,
    PresoftmaxDual,
    Injection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapContext {
    pub layer: usize,
    pub head: usize,
    pub round: usize,
    pub timestep: usize,
    pub kind: MapKind,
}

/// Receives every attention map built during a forward pass.
pub trait AttentionObserver {
    fn observe(&mut self, ctx: &MapContext, map: ArrayView2<f32>);
}

/// Tracks how far produced maps stray from being row-stochastic.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StochasticityAudit {
    pub maps: usize,
    pub max_row_error: f64,
    pub min_entry: f32,
    pub by_kind: BTreeMap<String, usize>,
}

impl StochasticityAudit {
    pub fn new() -> Self {
        Self {
            min_entry: f32::INFINITY,
            ..Default::default()
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.maps > 0 && self.max_row_error <= tol && self.min_entry >= 0.0
    }
}

impl AttentionObserver for StochasticityAudit {
    fn observe(&mut self, ctx: &MapContext, map: ArrayView2<f32>) {
        self.maps += 1;
        *self.by_kind.entry(format!("{:?}", ctx.kind)).or_default() += 1;
        for row in map.rows() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            self.max_row_error = self.max_row_error.max((sum - 1.0).abs());
            self.min_entry = row.fold(self.min_entry, |m, &v| m.min(v));
        }
    }
}

/// Writes attention maps as grayscale PNG heatmaps, each row scaled by its
/// maximum.
#[derive(Debug, Clone)]
pub struct HeatmapDumper {
    dir: PathBuf,
    layers: Option<Vec<usize>>,
    limit: usize,
    written: Vec<PathBuf>,
    errors: Vec<String>,
}

impl HeatmapDumper {
    pub fn new(dir: impl Into<PathBuf>, limit: usize) -> Self {
        Self {
            dir: dir.into(),
            layers: None,
            limit,
            written: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn only_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }
}

/// Row-normalized heatmap of an attention map.
pub fn heatmap_image(map: ArrayView2<f32>) -> image::GrayImage {
    let (rows, cols) = map.dim();
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for (y, row) in map.rows().into_iter().enumerate() {
        let max = row.fold(0.0f32, |m, &v| m.max(v));
        for (x, &v) in row.iter().enumerate() {
            let level = if max > 0.0 { v / max } else { 0.0 };
            img.put_pixel(x as u32, y as u32, image::Luma([(level * 255.0).round() as u8]));
        }
    }
    img
}

fn save_heatmap(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    heatmap_image(map).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl AttentionObserver for HeatmapDumper {
    fn observe(&mut self, ctx: &MapContext, map: ArrayView2<f32>) {
        if self.written.len() >= self.limit {
            return;
        }
        if let Some(layers) = &self.layers {
            if !layers.contains(&ctx.layer) {
                return;
            }
        }
        let name = format!(
            "r{}_t{:02}_l{:02}_h{}_{:?}.png",
            ctx.round, ctx.timestep, ctx.layer, ctx.head, ctx.kind
        )
        .to_lowercase();
        let path = self.dir.join(name);
        match save_heatmap(&path, map) {
            Ok(()) => self.written.push(path),
            Err(e) => self.errors.push(e.to_string()),
        }
    }
}

/// Where a forward pass reads or writes recorded features.
pub enum CacheAccess<'a> {
    None,
    Read(&'a AttentionFeatureCache),
    Write(&'a mut AttentionFeatureCache),
}

impl CacheAccess<'_> {
    fn read(&self) -> Option<&AttentionFeatureCache> {
        match self {
            CacheAccess::Read(c) => Some(c),
            CacheAccess::Write(c) => Some(c),
            CacheAccess::None => None,
        }
    }
}

/// The interface a denoiser calls at each of its self-attention sites.
/// `phi` is the site's normalized input; the hook returns the attention
/// output (heads merged) before the output projection.
pub trait AttentionHook {
    fn attend(
        &mut self,
        site: &AttentionSite,
        phi: ArrayView2<f32>,
        proj: &Projections<'_>,
    ) -> Result<Array2<f32>>;
}

/// Runs every site as ordinary self-attention.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainAttention;

impl AttentionHook for PlainAttention {
    fn attend(
        &mut self,
        _site: &AttentionSite,
        phi: ArrayView2<f32>,
        proj: &Projections<'_>,
    ) -> Result<Array2<f32>> {
        proj.check(&phi)?;
        let q = split_heads(&phi.dot(&proj.wq), proj.heads);
        let k = split_heads(&phi.dot(&proj.wk), proj.heads);
        let v = split_heads(&phi.dot(&proj.wv), proj.heads);
        let outs = (0..proj.heads)
            .map(|h| Ok(attention_map(q[h].view(), k[h].view())?.dot(&v[h])))
            .collect::<Result<Vec<_>>>()?;
        merge_heads(&outs)
    }
}

/// Applies [`AttentionDirectives`] at each site of one forward pass.
pub struct SiteDispatcher<'a> {
    directives: &'a AttentionDirectives,
    cache: CacheAccess<'a>,
    observer: Option<&'a mut dyn AttentionObserver>,
    visits: BTreeMap<usize, usize>,
}

impl<'a> SiteDispatcher<'a> {
    pub fn new(directives: &'a AttentionDirectives, cache: CacheAccess<'a>) -> Self {
        Self {
            directives,
            cache,
            observer: None,
            visits: BTreeMap::new(),
        }
    }

    pub fn with_observer(mut self, observer: Option<&'a mut dyn AttentionObserver>) -> Self {
        self.observer = observer;
        self
    }

    /// Number of times each layer was visited in this pass.
    pub fn visits(&self) -> &BTreeMap<usize, usize> {
        &self.visits
    }

    /// Checks that every directed site ran exactly once.
    pub fn finish(&self) -> Result<()> {
        for layer in self.directives.layers() {
            match self.visits.get(&layer) {
                Some(1) => {}
                Some(n) => {
                    return Err(Error::Model(format!(
                        "attention site {layer} ran {n} times in one forward pass"
                    )))
                }
                None => {
                    return Err(Error::Model(format!(
                        "attention site {layer} was never reached"
                    )))
                }
            }
        }
        Ok(())
    }

    fn observe(&mut self, layer: usize, head: usize, kind: MapKind, map: &Array2<f32>) {
        if let Some(obs) = self.observer.as_deref_mut() {
            let ctx = MapContext {
                layer,
                head,
                round: self.directives.round,
                timestep: self.directives.timestep,
                kind,
            };
            obs.observe(&ctx, map.view());
        }
    }

    fn lookup(&self, layer: usize, stream: Stream) -> Result<&FeatureRecord> {
        let key = FeatureKey {
            round: self.directives.round,
            timestep: self.directives.timestep,
            layer,
            stream,
        };
        match self.cache.read() {
            Some(cache) => cache.get(&key),
            None => Err(Error::CacheMiss {
                round: key.round,
                timestep: key.timestep,
                layer,
                stream,
            }),
        }
    }
}

fn component<'r>(
    rec: &'r FeatureRecord,
    part: &'r Option<Vec<Array2<f32>>>,
    key: (usize, usize, usize, Stream),
) -> Result<&'r [Array2<f32>]> {
    let _ = rec;
    part.as_deref().ok_or(Error::CacheMiss {
        round: key.0,
        timestep: key.1,
        layer: key.2,
        stream: key.3,
    })
}

impl AttentionHook for SiteDispatcher<'_> {
    fn attend(
        &mut self,
        site: &AttentionSite,
        phi: ArrayView2<f32>,
        proj: &Projections<'_>,
    ) -> Result<Array2<f32>> {
        run_site(self, site, phi, proj)
    }
}

/// Dispatches one site according to its directive.
///
/// Plain and record modes compute ordinary self-attention (recording does
/// not change the output). Transfer modes compute `q_out` and `v_out` from
/// the live `phi` and read the input/reference features recorded at the
/// same (round, timestep, layer); a missing entry is a hard error.
pub fn run_site(
    dispatcher: &mut SiteDispatcher<'_>,
    site: &AttentionSite,
    phi: ArrayView2<f32>,
    proj: &Projections<'_>,
) -> Result<Array2<f32>> {
    proj.check(&phi)?;
    let layer = site.id.layer_index;
    *dispatcher.visits.entry(layer).or_default() += 1;
    let directive = dispatcher.directives.get(layer);
    let heads = proj.heads;

    let q_live = split_heads(&phi.dot(&proj.wq), heads);
    let v_live = split_heads(&phi.dot(&proj.wv), heads);

    match directive.mode {
        SiteMode::Plain | SiteMode::Record(_) => {
            let k_live = split_heads(&phi.dot(&proj.wk), heads);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let a = attention_map(q_live[h].view(), k_live[h].view())?;
                dispatcher.observe(layer, h, MapKind::SelfAttention, &a);
                outs.push(a.dot(&v_live[h]));
            }
            if let SiteMode::Record(stream) = directive.mode {
                let (wq, wk, wv) = stream.components();
                let record = FeatureRecord {
                    q: wq.then(|| q_live.clone()),
                    k: wk.then_some(k_live),
                    v: wv.then(|| v_live.clone()),
                };
                let key = FeatureKey {
                    round: dispatcher.directives.round,
                    timestep: dispatcher.directives.timestep,
                    layer,
                    stream,
                };
                match &mut dispatcher.cache {
                    CacheAccess::Write(cache) => cache.insert(key, record)?,
                    _ => {
                        return Err(Error::Model(format!(
                            "record directive at layer {layer} without a writable cache"
                        )))
                    }
                }
            }
            merge_heads(&outs)
        }
        mode => {
            let round = dispatcher.directives.round;
            let t = dispatcher.directives.timestep;
            let needs_ref_l = matches!(
                mode,
                SiteMode::DualTransfer | SiteMode::G2gOnly | SiteMode::PresoftmaxDual
            );
            let inp = dispatcher.lookup(layer, Stream::Input)?.clone();
            let refr = dispatcher.lookup(layer, Stream::Ref)?.clone();
            let ref_l = if needs_ref_l {
                Some(dispatcher.lookup(layer, Stream::RefL)?.clone())
            } else {
                None
            };
            for rec in [Some(&inp), Some(&refr), ref_l.as_ref()].into_iter().flatten() {
                if rec.positions() != Some(phi.nrows()) {
                    return Err(Error::shape(
                        "cached features vs live site",
                        &[phi.nrows()],
                        &[rec.positions().unwrap_or(0)],
                    ));
                }
            }
            let q_in = component(&inp, &inp.q, (round, t, layer, Stream::Input))?;
            let k_in = component(&inp, &inp.k, (round, t, layer, Stream::Input))?;
            let k_ref = component(&refr, &refr.k, (round, t, layer, Stream::Ref))?;
            let v_ref = component(&refr, &refr.v, (round, t, layer, Stream::Ref))?;
            let k_ref_l = match &ref_l {
                Some(r) => Some(component(r, &r.k, (round, t, layer, Stream::RefL))?),
                None => None,
            };
            if q_in.len() != heads {
                return Err(Error::shape("cached head count", &[heads], &[q_in.len()]));
            }

            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (a, kind) = match mode {
                    SiteMode::DualTransfer => (
                        dual_attention_map(
                            q_in[h].view(),
                            k_ref_l.expect("needs_ref_l")[h].view(),
                            q_live[h].view(),
                            k_ref[h].view(),
                            directive.gamma,
                        )?,
                        MapKind::Dual,
                    ),
                    SiteMode::G2gOnly => (
                        attention_map(q_in[h].view(), k_ref_l.expect("needs_ref_l")[h].view())?,
                        MapKind::GrayToGray,
                    ),
                    SiteMode::C2cOnly => (
                        attention_map(q_live[h].view(), k_ref[h].view())?,
                        MapKind::ColorToColor,
                    ),
                    SiteMode::G2cOnly => (
                        g2c_attention_map(q_in[h].view(), k_ref[h].view())?,
                        MapKind::GrayToColor,
                    ),
                    SiteMode::PresoftmaxDual => (
                        presoftmax_dual_map(
                            q_in[h].view(),
                            k_ref_l.expect("needs_ref_l")[h].view(),
                            q_live[h].view(),
                            k_ref[h].view(),
                            directive.gamma,
                        )?,
                        MapKind::PresoftmaxDual,
                    ),
                    SiteMode::Plain | SiteMode::Record(_) => unreachable!(),
                };
                dispatcher.observe(layer, h, kind, &a);
                let out = if directive.beta == 0.0 {
                    a.dot(&v_ref[h])
                } else {
                    let a_in = attention_map(q_in[h].view(), k_in[h].view())?;
                    dispatcher.observe(layer, h, MapKind::Injection, &a_in);
                    transfer_output(
                        a.view(),
                        v_ref[h].view(),
                        a_in.view(),
                        v_live[h].view(),
                        directive.beta,
                    )?
                };
                outs.push(out);
            }
            merge_heads(&outs)
        }
    }
}
