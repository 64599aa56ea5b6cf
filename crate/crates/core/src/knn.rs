//! Pixel-level K-nearest-neighbor graphs across peer images.
//!
//! Training graphs use the current batch as its own peer set, with Bernoulli
//! dropout on the all-pairs distances; test graphs connect query pixels only
//! to a fixed peer bank, with no distance dropout. Both the materialized
//! distance-matrix path and the streaming builders share one per-row kernel
//! and one per-row RNG protocol, so they produce identical graphs.

use rayon::prelude::*;

use crate::checkpoint::{pack_u64, unpack_u64, Container};
use crate::error::{Error, Result};
use crate::rng::{derive, Rng, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng as _;

/// Epsilon added to the norm product in the cosine distance denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Per-image n x d pixel-feature matrix; row `p` is the feature vector of
/// spatial position `(p / W, p % W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub image_id: usize,
    pub n: usize,
    pub d: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(image_id: usize, n: usize, d: usize, pixels: Vec<T>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid_shape("feature map needs n > 0 and d > 0"));
        }
        if pixels.len() != n * d {
            return Err(Error::invalid_shape(format!(
                "feature map {n}x{d} needs {} values, got {}",
                n * d,
                pixels.len()
            )));
        }
        Ok(FeatureMap { image_id, n, d, pixels })
    }
}

/// A set of same-shape feature maps in pixel-major layout, with cached row
/// norms. This is the working view for distance computation and gathering.
pub struct FeatureSet<T> {
    image_ids: Vec<usize>,
    pixels: Vec<T>,
    norms: Vec<T>,
    images: usize,
    pixels_per_image: usize,
    dim: usize,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn from_maps(maps: Vec<FeatureMap<T>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid_argument("feature set needs at least one map"));
        }
        let (n, d) = (maps[0].n, maps[0].d);
        let mut pixels = Vec::with_capacity(maps.len() * n * d);
        let mut image_ids = Vec::with_capacity(maps.len());
        for m in &maps {
            if m.n != n || m.d != d {
                return Err(Error::invalid_shape(format!(
                    "feature maps disagree: {}x{} vs {n}x{d}",
                    m.n, m.d
                )));
            }
            pixels.extend_from_slice(&m.pixels);
            image_ids.push(m.image_id);
        }
        Ok(Self::from_parts(image_ids, pixels, maps.len(), n, d))
    }

    /// Pixel-major view of a `[B, C, H, W]` activation tensor: row
    /// `b*H*W + y*W + x` holds the C channel values at `(y, x)`.
    pub fn from_chw(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid_shape(format!(
                "expected [B,C,H,W] features, got {s:?}"
            )));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = t.data();
        let mut pixels = vec![T::zero(); b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                let src = &data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    pixels[(bi * hw + p) * c + ci] = v;
                }
            }
        }
        Ok(Self::from_parts((0..b).collect(), pixels, b, hw, c))
    }

    fn from_parts(
        image_ids: Vec<usize>,
        pixels: Vec<T>,
        images: usize,
        n: usize,
        d: usize,
    ) -> Self {
        let norms = pixels
            .chunks(d)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        FeatureSet {
            image_ids,
            pixels,
            norms,
            images,
            pixels_per_image: n,
            dim: d,
        }
    }

    pub fn images(&self) -> usize {
        self.images
    }
    pub fn pixels_per_image(&self) -> usize {
        self.pixels_per_image
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn rows(&self) -> usize {
        self.images * self.pixels_per_image
    }
    pub fn image_ids(&self) -> &[usize] {
        &self.image_ids
    }
    pub fn row(&self, r: usize) -> &[T] {
        &self.pixels[r * self.dim..(r + 1) * self.dim]
    }
    pub fn row_norm(&self, r: usize) -> T {
        self.norms[r]
    }
    /// The full pixel-major buffer `[rows, d]`.
    pub fn pixels_slice(&self) -> &[T] {
        &self.pixels
    }

    /// Column-major copy `[d][rows]` for the vectorized distance scans.
    fn to_soa(&self) -> Vec<T> {
        let (rows, d) = (self.rows(), self.dim);
        let mut soa = vec![T::zero(); rows * d];
        for r in 0..rows {
            for c in 0..d {
                soa[c * rows + r] = self.pixels[r * d + c];
            }
        }
        soa
    }
}

/// Peer features transposed into L2-sized column blocks: block `b` holds
/// channels contiguously over `cb` candidates, so a block stays cached while
/// a row block of queries streams over it.
struct BlockedSoa<T> {
    data: Vec<T>,
    cb: usize,
    d: usize,
    nblocks: usize,
    cols: usize,
}

impl<T: Scalar> BlockedSoa<T> {
    fn build(fs: &FeatureSet<T>, cb: usize) -> Self {
        let (cols, d) = (fs.rows(), fs.dim());
        let nblocks = cols.div_ceil(cb);
        let mut data = vec![T::zero(); nblocks * d * cb];
        for r in 0..cols {
            let (b, jl) = (r / cb, r % cb);
            for c in 0..d {
                data[(b * d + c) * cb + jl] = fs.pixels[r * d + c];
            }
        }
        BlockedSoa { data, cb, d, nblocks, cols }
    }

    #[inline]
    fn block_width(&self, b: usize) -> usize {
        (self.cols - b * self.cb).min(self.cb)
    }

    #[inline]
    fn channel(&self, b: usize, c: usize, width: usize) -> &[T] {
        &self.data[(b * self.d + c) * self.cb..(b * self.d + c) * self.cb + width]
    }
}

/// Candidate block width that keeps one peer block resident in L2.
fn col_block_len<T>(d: usize) -> usize {
    let budget = 256 << 10;
    (budget / (d * std::mem::size_of::<T>()).max(1)).clamp(512, 8192) & !7
}

/// Cosine distances of one query against one candidate block. Accumulation
/// runs channel-ascending per candidate so every code path produces
/// bit-identical values.
#[inline]
fn block_distances<T: Scalar>(
    q: &[T],
    qn: T,
    soa: &BlockedSoa<T>,
    b: usize,
    norms_b: &[T],
    acc: &mut [T],
    dist: &mut [T],
) {
    let width = dist.len();
    let acc = &mut acc[..width];
    acc.iter_mut().for_each(|v| *v = T::zero());
    for (c, &qc) in q.iter().enumerate() {
        let col = soa.channel(b, c, width);
        for (a, &pv) in acc.iter_mut().zip(col) {
            *a += qc * pv;
        }
    }
    let eps = T::from_f64(NORM_EPS);
    let one = T::one();
    for ((dv, &a), &pn) in dist.iter_mut().zip(acc.iter()).zip(norms_b) {
        *dv = one - a / (qn * pn + eps);
    }
}

#[inline]
fn rec_better<T: Scalar>(d1: T, j1: u32, d2: T, j2: u32) -> bool {
    if d1 < d2 {
        true
    } else if d1 > d2 {
        false
    } else {
        j1 < j2
    }
}

/// Insert into a K-slot buffer kept sorted ascending by (distance, flat
/// index). Candidates arrive in ascending flat-index order, which realizes
/// the (image, pixel) lexicographic tie-break.
#[inline]
fn insert_topk<T: Scalar>(buf: &mut [(T, u32)], len: &mut usize, d: T, flat: u32) {
    let k = buf.len();
    if *len == k {
        let (wd, wj) = buf[k - 1];
        if !rec_better(d, flat, wd, wj) {
            return;
        }
        *len -= 1;
    }
    let mut i = *len;
    while i > 0 && rec_better(d, flat, buf[i - 1].0, buf[i - 1].1) {
        buf[i] = buf[i - 1];
        i -= 1;
    }
    buf[i] = (d, flat);
    *len += 1;
}

/// Exact selection over one distance segment (no dropout): an 8-wide
/// threshold filter skips candidates that cannot enter the buffer.
#[inline]
fn select_segment<T: Scalar>(dist: &[T], flat0: u32, buf: &mut [(T, u32)], len: &mut usize) {
    let k = buf.len();
    let mut i = 0;
    while i + 8 <= dist.len() {
        let worst = if *len == k { buf[k - 1].0 } else { T::infinity() };
        let chunk = &dist[i..i + 8];
        let mut hit = false;
        for &v in chunk {
            hit |= v < worst;
        }
        if hit {
            for (jj, &v) in chunk.iter().enumerate() {
                insert_topk(buf, len, v, flat0 + (i + jj) as u32);
            }
        }
        i += 8;
    }
    for (jj, &v) in dist[i..].iter().enumerate() {
        insert_topk(buf, len, v, flat0 + (i + jj) as u32);
    }
}

/// Selection with a Bernoulli drop mask drawn per candidate, in candidate
/// order, from the row's splitmix stream. Dropped candidates have their
/// distance forced to +inf so the same 8-wide filter applies; the scalar
/// path re-checks the mask before inserting.
#[inline]
fn select_masked_segment<T: Scalar>(
    dist: &mut [T],
    mask: &mut [bool],
    flat0: u32,
    rng: &mut SplitMix64,
    threshold: u64,
    buf: &mut [(T, u32)],
    len: &mut usize,
    survived: &mut usize,
) {
    let mask = &mut mask[..dist.len()];
    rng.fill_drop_mask(threshold, mask);
    let k = buf.len();
    for (v, &dropped) in dist.iter_mut().zip(mask.iter()) {
        if dropped {
            *v = T::infinity();
        } else {
            *survived += 1;
        }
    }
    let mut i = 0;
    while i + 8 <= dist.len() {
        let worst = if *len == k { buf[k - 1].0 } else { T::infinity() };
        let chunk = &dist[i..i + 8];
        let mut hit = false;
        for &v in chunk {
            hit |= v < worst;
        }
        if hit || *len < k {
            for (jj, &v) in chunk.iter().enumerate() {
                if !mask[i + jj] {
                    insert_topk(buf, len, v, flat0 + (i + jj) as u32);
                }
            }
        }
        i += 8;
    }
    for (jj, &v) in dist[i..].iter().enumerate() {
        if !mask[i + jj] {
            insert_topk(buf, len, v, flat0 + (i + jj) as u32);
        }
    }
}

fn emit_records<T: Scalar>(buf: &[(T, u32)], peer_pixels: usize, out: &mut [NeighborRec<T>]) {
    for (slot, &(dv, flat)) in out.iter_mut().zip(buf) {
        slot.image = flat / peer_pixels as u32;
        slot.pixel = flat % peer_pixels as u32;
        slot.distance = dv;
    }
}

/// Dense all-pairs cosine distances with the (image, pixel) layouts of both
/// sides attached.
pub struct DistanceMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub query_images: usize,
    pub query_pixels: usize,
    pub peer_images: usize,
    pub peer_pixels: usize,
}

/// One neighbor record: peer-set image index, pixel index, cosine distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborRec<T> {
    pub image: u32,
    pub pixel: u32,
    pub distance: T,
}

/// K nearest peer pixels for every query pixel, sorted ascending by
/// distance with (image, pixel) lexicographic tie-breaking.
#[derive(Debug)]
pub struct PeerGraph<T> {
    pub k: usize,
    pub query_images: usize,
    pub query_pixels: usize,
    pub peer_images: usize,
    pub peer_pixels: usize,
    pub peer_image_ids: Vec<usize>,
    /// Monte Carlo batch index this graph belongs to.
    pub batch_index: usize,
    pub neighbors: Vec<NeighborRec<T>>,
}

impl<T: Scalar> PeerGraph<T> {
    pub fn rows(&self) -> usize {
        self.query_images * self.query_pixels
    }

    pub fn neighbors_of(&self, image: usize, pixel: usize) -> &[NeighborRec<T>] {
        let row = image * self.query_pixels + pixel;
        &self.neighbors[row * self.k..(row + 1) * self.k]
    }
}

#[inline]
fn distance_row<T: Scalar>(
    query: &[T],
    query_norm: T,
    peer_soa: &[T],
    peer_norms: &[T],
    out: &mut [T],
) {
    let cols = peer_norms.len();
    debug_assert_eq!(out.len(), cols);
    out.iter_mut().for_each(|v| *v = T::zero());
    for (c, &qc) in query.iter().enumerate() {
        let col = &peer_soa[c * cols..(c + 1) * cols];
        for (acc, &pv) in out.iter_mut().zip(col) {
            *acc += qc * pv;
        }
    }
    let eps = T::from_f64(NORM_EPS);
    let one = T::one();
    for (acc, &pn) in out.iter_mut().zip(peer_norms) {
        *acc = one - *acc / (query_norm * pn + eps);
    }
}

/// All-pairs cosine distances: entry = 1 - <u,v> / (|u||v| + 1e-12).
pub fn cosine_distance_matrix<T: Scalar>(
    queries: &FeatureSet<T>,
    peers: &FeatureSet<T>,
) -> Result<DistanceMatrix<T>> {
    if queries.dim() != peers.dim() {
        return Err(Error::invalid_shape(format!(
            "cosine_distance_matrix: channel dims differ ({} vs {})",
            queries.dim(),
            peers.dim()
        )));
    }
    let (rows, cols) = (queries.rows(), peers.rows());
    let soa = peers.to_soa();
    let mut data = vec![T::zero(); rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(r, out)| {
        distance_row(queries.row(r), queries.row_norm(r), &soa, &peers.norms, out);
    });
    Ok(DistanceMatrix {
        rows,
        cols,
        data,
        query_images: queries.images(),
        query_pixels: queries.pixels_per_image(),
        peer_images: peers.images(),
        peer_pixels: peers.pixels_per_image(),
    })
}

/// Select the K nearest surviving candidates from one materialized distance
/// row. A row that loses too many candidates to the mask is retried once
/// with a fresh mask, then raised.
fn select_row<T: Scalar>(
    dist: &[T],
    peer_pixels: usize,
    k: usize,
    drop_rate: f64,
    base_seed: u64,
    row: usize,
    out: &mut [NeighborRec<T>],
) -> Result<()> {
    debug_assert_eq!(out.len(), k);
    let mut buf = vec![(T::infinity(), u32::MAX); k];
    let attempts = if drop_rate > 0.0 { 2 } else { 1 };
    let threshold = SplitMix64::bernoulli_threshold(drop_rate);
    for attempt in 0..attempts {
        let mut len = 0usize;
        let mut survived = 0usize;
        buf.iter_mut().for_each(|s| *s = (T::infinity(), u32::MAX));
        if drop_rate > 0.0 {
            let mut scratch = dist.to_vec();
            let mut mask = vec![false; dist.len()];
            let mut rng = SplitMix64::new(derive(base_seed, (row as u64) << 1 | attempt as u64));
            select_masked_segment(
                &mut scratch,
                &mut mask,
                0,
                &mut rng,
                threshold,
                &mut buf,
                &mut len,
                &mut survived,
            );
        } else {
            select_segment(dist, 0, &mut buf, &mut len);
        }
        if len == k {
            emit_records(&buf, peer_pixels, out);
            return Ok(());
        }
        if attempt + 1 == attempts {
            return Err(Error::InsufficientCandidates {
                query: row,
                needed: k,
                survived,
            });
        }
    }
    unreachable!()
}

/// K-nearest-neighbor selection over a materialized distance matrix.
/// `drop_rate = 0` is exact KNN; otherwise candidates are removed by a
/// Bernoulli mask before selection (a dropped pair is excluded entirely).
pub fn knn_select<T: Scalar>(
    dist: &DistanceMatrix<T>,
    k: usize,
    drop_rate: f64,
    rng: &mut Rng,
) -> Result<PeerGraph<T>> {
    validate_knn_args(k, drop_rate, dist.cols)?;
    let base_seed: u64 = rng.gen();
    let mut neighbors = vec![
        NeighborRec {
            image: 0,
            pixel: 0,
            distance: T::zero()
        };
        dist.rows * k
    ];
    neighbors
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(row, out)| {
            let row_dist = &dist.data[row * dist.cols..(row + 1) * dist.cols];
            select_row(row_dist, dist.peer_pixels, k, drop_rate, base_seed, row, out)
        })?;
    Ok(PeerGraph {
        k,
        query_images: dist.query_images,
        query_pixels: dist.query_pixels,
        peer_images: dist.peer_images,
        peer_pixels: dist.peer_pixels,
        peer_image_ids: (0..dist.peer_images).collect(),
        batch_index: 0,
        neighbors,
    })
}

fn validate_knn_args(k: usize, drop_rate: f64, candidates: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid_argument("knn: K must be >= 1"));
    }
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(Error::invalid_argument(format!(
            "knn: drop rate {drop_rate} outside [0, 1]"
        )));
    }
    if candidates < k {
        return Err(Error::InsufficientCandidates {
            query: 0,
            needed: k,
            survived: candidates,
        });
    }
    Ok(())
}

/// How many distance-row floats may be materialized at once while streaming
/// graph construction (512 MB default).
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub memory_budget_bytes: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            memory_budget_bytes: 512 << 20,
        }
    }
}

fn build_graph_streaming<T: Scalar>(
    queries: &FeatureSet<T>,
    peers: &FeatureSet<T>,
    k: usize,
    drop_rate: f64,
    base_seed: u64,
    opts: GraphOptions,
) -> Result<PeerGraph<T>> {
    if queries.dim() != peers.dim() {
        return Err(Error::invalid_shape(format!(
            "knn graph: channel dims differ ({} vs {})",
            queries.dim(),
            peers.dim()
        )));
    }
    validate_knn_args(k, drop_rate, peers.rows())?;
    let rows = queries.rows();
    let d = queries.dim();
    // Column block: L2-resident, and never above the caller's buffer budget.
    let cb = col_block_len::<T>(d)
        .min((opts.memory_budget_bytes / (2 * std::mem::size_of::<T>())).max(8))
        .max(8);
    let soa = BlockedSoa::build(peers, cb);
    let threshold = SplitMix64::bernoulli_threshold(drop_rate);
    let peer_pixels = peers.pixels_per_image();

    const ROW_BLOCK: usize = 16;
    let mut neighbors = vec![
        NeighborRec {
            image: 0,
            pixel: 0,
            distance: T::zero()
        };
        rows * k
    ];
    neighbors
        .par_chunks_mut(ROW_BLOCK * k)
        .enumerate()
        .try_for_each(|(blk, out_chunk)| -> Result<()> {
            let row0 = blk * ROW_BLOCK;
            let rows_here = out_chunk.len() / k;
            let mut state = vec![(T::infinity(), u32::MAX); rows_here * k];
            let mut lens = vec![0usize; rows_here];
            let mut survived = vec![0usize; rows_here];
            let mut rngs: Vec<Option<SplitMix64>> = (0..rows_here)
                .map(|r| {
                    (drop_rate > 0.0).then(|| {
                        SplitMix64::new(derive(base_seed, ((row0 + r) as u64) << 1))
                    })
                })
                .collect();
            let mut acc = vec![T::zero(); cb];
            let mut dist = vec![T::zero(); cb];
            let mut mask = vec![false; cb];

            // Stream candidate blocks over the whole row block so each peer
            // block is loaded once per ROW_BLOCK queries.
            for b in 0..soa.nblocks {
                let width = soa.block_width(b);
                let norms_b = &peers.norms[b * cb..b * cb + width];
                let flat0 = (b * cb) as u32;
                for r in 0..rows_here {
                    let row = row0 + r;
                    block_distances(
                        queries.row(row),
                        queries.row_norm(row),
                        &soa,
                        b,
                        norms_b,
                        &mut acc,
                        &mut dist[..width],
                    );
                    let buf = &mut state[r * k..(r + 1) * k];
                    match rngs[r].as_mut() {
                        Some(rng) => select_masked_segment(
                            &mut dist[..width],
                            &mut mask,
                            flat0,
                            rng,
                            threshold,
                            buf,
                            &mut lens[r],
                            &mut survived[r],
                        ),
                        None => select_segment(&dist[..width], flat0, buf, &mut lens[r]),
                    }
                }
            }

            for r in 0..rows_here {
                let row = row0 + r;
                let buf = &mut state[r * k..(r + 1) * k];
                if lens[r] < k {
                    // Retry the whole row once with a fresh mask.
                    lens[r] = 0;
                    survived[r] = 0;
                    buf.iter_mut().for_each(|s| *s = (T::infinity(), u32::MAX));
                    let mut rng = SplitMix64::new(derive(base_seed, ((row as u64) << 1) | 1));
                    for b in 0..soa.nblocks {
                        let width = soa.block_width(b);
                        let norms_b = &peers.norms[b * cb..b * cb + width];
                        block_distances(
                            queries.row(row),
                            queries.row_norm(row),
                            &soa,
                            b,
                            norms_b,
                            &mut acc,
                            &mut dist[..width],
                        );
                        select_masked_segment(
                            &mut dist[..width],
                            &mut mask,
                            (b * cb) as u32,
                            &mut rng,
                            threshold,
                            buf,
                            &mut lens[r],
                            &mut survived[r],
                        );
                    }
                    if lens[r] < k {
                        return Err(Error::InsufficientCandidates {
                            query: row,
                            needed: k,
                            survived: survived[r],
                        });
                    }
                }
                emit_records(buf, peer_pixels, &mut out_chunk[r * k..(r + 1) * k]);
            }
            Ok(())
        })?;
    Ok(PeerGraph {
        k,
        query_images: queries.images(),
        query_pixels: queries.pixels_per_image(),
        peer_images: peers.images(),
        peer_pixels: peers.pixels_per_image(),
        peer_image_ids: peers.image_ids().to_vec(),
        batch_index: 0,
        neighbors,
    })
}

/// Training-time graph: the batch is its own peer set (each image included),
/// with Bernoulli distance dropout ahead of the top-K selection.
pub fn build_train_graph<T: Scalar>(
    batch_features: &FeatureSet<T>,
    k: usize,
    drop_rate: f64,
    rng: &mut Rng,
) -> Result<PeerGraph<T>> {
    let base_seed: u64 = rng.gen();
    build_graph_streaming(
        batch_features,
        batch_features,
        k,
        drop_rate,
        base_seed,
        GraphOptions::default(),
    )
}

/// Test-time graph: query pixels connect only to the fixed peer set; no
/// distance dropout (test-time stochasticity comes from resampling the bank
/// across Monte Carlo runs).
pub fn build_test_graph<T: Scalar>(
    sample_features: &FeatureSet<T>,
    peer_features: &FeatureSet<T>,
    k: usize,
) -> Result<PeerGraph<T>> {
    build_graph_streaming(
        sample_features,
        peer_features,
        k,
        0.0,
        0,
        GraphOptions::default(),
    )
}

/// N fixed peer images sampled uniformly without replacement from a pool;
/// reconstructible from the seed.
pub struct PeerBank<T: Scalar> {
    pub images: Tensor<T>,
    pub image_ids: Vec<usize>,
    pub seed: u64,
    /// Which feature layer the bank entries come from (0 = raw images).
    pub layer_tag: u32,
}

impl<T: Scalar> PeerBank<T> {
    /// Draw `n` distinct indices from `pool` (shape `[M, C, H, W]`).
    pub fn sample(pool: &Tensor<T>, n: usize, seed: u64) -> Result<Self> {
        let s = pool.shape();
        if s.len() != 4 {
            return Err(Error::invalid_shape(format!(
                "peer bank pool must be [M,C,H,W], got {s:?}"
            )));
        }
        let m = s[0];
        if n == 0 || n > m {
            return Err(Error::invalid_argument(format!(
                "cannot sample {n} peers from a pool of {m}"
            )));
        }
        let image_ids = sample_without_replacement(m, n, seed);
        let images = gather_images(pool, &image_ids);
        Ok(PeerBank {
            images,
            image_ids,
            seed,
            layer_tag: 0,
        })
    }

    /// Serialize ids, seed and layer tag (pixel data is reconstructible from
    /// the dataset).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let ids: Vec<f32> = self.image_ids.iter().map(|&i| i as f32).collect();
        c.push("bank.image_ids", vec![ids.len()], ids);
        let [lo, hi] = pack_u64(self.seed);
        c.push("bank.meta", vec![3], vec![lo, hi, f32::from_bits(self.layer_tag)]);
        c
    }

    pub fn from_container(c: &Container, pool: &Tensor<T>) -> Result<Self> {
        let ids = c
            .get("bank.image_ids")
            .ok_or_else(|| Error::Data("container has no bank.image_ids".into()))?;
        let meta = c
            .get("bank.meta")
            .ok_or_else(|| Error::Data("container has no bank.meta".into()))?;
        if meta.values.len() != 3 {
            return Err(Error::Data("bank.meta must have 3 values".into()));
        }
        let image_ids: Vec<usize> = ids.values.iter().map(|&v| v as usize).collect();
        let m = pool.shape()[0];
        if let Some(&bad) = image_ids.iter().find(|&&i| i >= m) {
            return Err(Error::Data(format!(
                "bank image id {bad} out of range for pool of {m}"
            )));
        }
        let images = gather_images(pool, &image_ids);
        Ok(PeerBank {
            images,
            image_ids,
            seed: unpack_u64(meta.values[0], meta.values[1]),
            layer_tag: meta.values[2].to_bits(),
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

pub(crate) fn sample_without_replacement(m: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::rng::seeded(seed);
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..n {
        let j = rng.gen_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

fn gather_images<T: Scalar>(pool: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    let s = pool.shape();
    let img_len: usize = s[1..].iter().product();
    let data = pool.data();
    let mut out = Vec::with_capacity(ids.len() * img_len);
    for &id in ids {
        out.extend_from_slice(&data[id * img_len..(id + 1) * img_len]);
    }
    let mut shape = s.to_vec();
    shape[0] = ids.len();
    Tensor::new_unchecked(shape, out)
}
