//! Stage-by-stage experiment runner.
//!
//! Every stage reads what earlier stages left in the output directory, so
//! the CLI can run stages one at a time and [`run_experiment`] can chain
//! them. Images are decoded one at a time; only subsampled descriptor pools
//! and per-image encodings are kept in memory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{chi2_kernel, combine_kernels, linear_kernel, ova_train, Gamma, KernelMatrix, OvaModel};
use crate::color_features::{
    dense_cn, dense_dd, rcc_descriptor, train_dd_partition_traced, ColorCodebook, ColorNameTable, DdCounter, DdPartition,
};
use crate::container::{Container, ModelKind};
use crate::corpus::{load_manifest, resize_shorter_side, srgb_to_lab, to_grayscale, EraLabel, Manifest, Split};
use crate::dating::{date_painting, save_report, CropClassifier, DatingReport, VoteMode, VoteTally};
use crate::descriptor::{DescriptorSet, Geometry};
use crate::dunnet::{extract_codes, image_to_input, load_params, save_params, train_with, write_log, NetConfig, NetParams};
use crate::encoding::{bow_encode, fisher_vector, gmm_fit, ifv_normalize, kmeans_fit, subsample_rows, GmmModel, KmeansModel};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::shape_features::dense_sift;

use super::config::PipelineConfig;
use super::protocol::{
    learning_curve_partitions, pair_dataset, split_fixed, sub_seed, table_rows, ExperimentSpec, ExperimentTask, Feature, Row,
    Task,
};
use super::report::{AccuracyReport, Cell, CurvePoint, LearningCurveReport, Timings};

/// Layout of an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn pool(&self, name: &str) -> PathBuf {
        self.root.join("pools").join(name)
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn features(&self, name: &str) -> PathBuf {
        self.root.join("features").join(name)
    }

    pub fn classifier(&self, task: &Task, row: &Row) -> PathBuf {
        self.root.join("classifiers").join(task.name()).join(row.name())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingModel(path.display().to_string()))
    }
}

/// Input to the hand-crafted extractors: shorter side scaled to `work_side`.
pub fn work_image(img: &RgbImage, cfg: &PipelineConfig) -> RgbImage {
    if cfg.work_side == 0 || img.width().min(img.height()) == cfg.work_side {
        img.clone()
    } else {
        resize_shorter_side(img, cfg.work_side)
    }
}

pub fn load_cn_table(cfg: &PipelineConfig) -> Result<ColorNameTable> {
    if cfg.cn_table.is_empty() {
        Ok(ColorNameTable::fallback(ColorNameTable::DEFAULT_RESOLUTION))
    } else {
        ColorNameTable::load_csv(Path::new(&cfg.cn_table))
    }
}

fn stream_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn subsample_set(set: &DescriptorSet, cap: usize, rng: &mut ChaCha8Rng) -> DescriptorSet {
    let mut out = DescriptorSet::new(set.dim());
    for i in subsample_rows(set.len(), cap, rng) {
        out.push(set.row(i), set.geometry()[i]);
    }
    out
}

fn lab_pixels(img: &RgbImage) -> DescriptorSet {
    let mut set = DescriptorSet::new(3);
    for px in img.pixels() {
        set.push(&srgb_to_lab(px), Geometry::default());
    }
    set
}

fn dd_sizes(features: &[Feature]) -> Vec<usize> {
    features.iter().filter_map(|f| f.dd_categories()).collect()
}

fn needs_color_books(features: &[Feature]) -> bool {
    features.iter().any(|f| matches!(f, Feature::Cn11 | Feature::Rcc) || f.dd_categories().is_some())
}

#[derive(Default)]
struct LocalPools {
    sift: Option<DescriptorSet>,
    cn: Option<DescriptorSet>,
    lab: Option<DescriptorSet>,
    dd: Option<DdCounter>,
}

/// Pools subsampled local descriptors of the training split for encoder
/// training: dense SIFT, dense CN, Lab pixels and DD bin counts, as needed
/// by `features`. Each image contributes an equal share of every cap.
pub fn extract(ws: &Workspace, manifest: &Manifest, cfg: &PipelineConfig, features: &[Feature], seed: u64) -> Result<()> {
    let train = split_fixed(manifest)?.train;
    let n = train.entries.len();
    let want_sift = features.contains(&Feature::IfvSift);
    let want_cn = features.contains(&Feature::Cn11);
    let want_rcc = features.contains(&Feature::Rcc);
    let want_dd = !dd_sizes(features).is_empty();
    let table = if want_cn { Some(load_cn_table(cfg)?) } else { None };
    let share = |cap: usize| cap.div_ceil(n).max(1);
    let base = sub_seed(seed, "extract");
    let locals: Vec<LocalPools> = train
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<LocalPools> {
            let img = train.load(e)?;
            let work = work_image(&img.pixels, cfg);
            let mut rng = stream_rng(base, i);
            let mut out = LocalPools::default();
            if want_sift {
                let set = dense_sift(&to_grayscale(&work), cfg.sift_step, cfg.sift_scales);
                out.sift = Some(subsample_set(&set, share(cfg.gmm_max_descriptors), &mut rng));
            }
            if let Some(table) = &table {
                let set = dense_cn(&work, table, cfg.color_step, &cfg.color_patch_sides);
                out.cn = Some(subsample_set(&set, share(cfg.bow_max_descriptors), &mut rng));
            }
            if want_rcc {
                out.lab = Some(subsample_set(&lab_pixels(&work), share(cfg.rcc_sample_cap), &mut rng));
            }
            if want_dd {
                let mut counter = DdCounter::new(cfg.dd_bins);
                counter.add(&work, img.label.expect("split_fixed keeps labelled rows"));
                out.dd = Some(counter);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    ws.dir("pools")?;
    let merge = |pick: fn(&LocalPools) -> Option<&DescriptorSet>, dim: usize, name: &str| -> Result<()> {
        let mut all = DescriptorSet::new(dim);
        for l in &locals {
            if let Some(s) = pick(l) {
                all.extend(s);
            }
        }
        log::info!("pool {name}: {} descriptors", all.len());
        all.save(&ws.pool(name))
    };
    if want_sift {
        merge(|l| l.sift.as_ref(), crate::shape_features::DESCRIPTOR_LEN, "sift.dsc")?;
    }
    if want_cn {
        merge(|l| l.cn.as_ref(), crate::color_features::NUM_COLOR_NAMES, "cn.dsc")?;
    }
    if want_rcc {
        merge(|l| l.lab.as_ref(), 3, "lab.dsc")?;
    }
    if want_dd {
        let mut total = DdCounter::new(cfg.dd_bins);
        for l in &locals {
            total.merge(l.dd.as_ref().expect("counted above"));
        }
        total.to_container().save(&ws.pool("dd_counts.stym"))?;
    }
    Ok(())
}

/// EM on the pooled SIFT descriptors.
pub fn train_gmm(ws: &Workspace, cfg: &PipelineConfig, seed: u64) -> Result<GmmModel> {
    let path = ws.pool("sift.dsc");
    require(&path)?;
    let pool = DescriptorSet::load(&path)?;
    let fit = gmm_fit(pool.view(), cfg.gmm_components, sub_seed(seed, "gmm"), cfg.gmm_max_iter, cfg.gmm_tol, None)?;
    log::info!("gmm: {} iterations, final log-likelihood {:?}", fit.iterations, fit.log_likelihood.last());
    ws.dir("models")?;
    fit.model.to_container().save(&ws.model("gmm.stym"))?;
    Ok(fit.model)
}

fn fit_bow(data: &DescriptorSet, cfg: &PipelineConfig, seed: u64) -> Result<KmeansModel> {
    Ok(kmeans_fit(data.view(), cfg.bow_centers, seed, cfg.kmeans_max_iter, cfg.kmeans_tol)?.model)
}

/// Color-name and DD bag-of-words codebooks, DD partitions and the RCC color codebook.
pub fn train_codebooks(ws: &Workspace, manifest: &Manifest, cfg: &PipelineConfig, features: &[Feature], seed: u64) -> Result<()> {
    ws.dir("models")?;
    if features.contains(&Feature::Cn11) {
        let path = ws.pool("cn.dsc");
        require(&path)?;
        let bow = fit_bow(&DescriptorSet::load(&path)?, cfg, sub_seed(seed, "cn-bow"))?;
        bow.to_container(ModelKind::Kmeans).save(&ws.model("cn_bow.stym"))?;
    }
    if features.contains(&Feature::Rcc) {
        let path = ws.pool("lab.dsc");
        require(&path)?;
        let pool = DescriptorSet::load(&path)?;
        let fit = kmeans_fit(pool.view(), cfg.rcc_codes, sub_seed(seed, "rcc-codebook"), cfg.kmeans_max_iter, cfg.kmeans_tol)?;
        ColorCodebook {
            centers: fit.model.centers,
        }
        .to_container()
        .save(&ws.model("rcc_codebook.stym"))?;
    }
    let sizes = dd_sizes(features);
    if sizes.is_empty() {
        return Ok(());
    }
    let path = ws.pool("dd_counts.stym");
    require(&path)?;
    let counts = DdCounter::from_container(&Container::load(&path)?.expect(ModelKind::Matrix)?)?.finish()?;
    let mut parts = Vec::new();
    for &r in &sizes {
        let (part, _) = train_dd_partition_traced(&counts, r)?;
        part.to_container().save(&ws.model(&format!("dd{r}_partition.stym")))?;
        parts.push(part);
    }
    // second pass: dense DD descriptors under the trained partitions
    let train = split_fixed(manifest)?.train;
    let share = cfg.bow_max_descriptors.div_ceil(train.entries.len()).max(1);
    let base = sub_seed(seed, "dd-pool");
    let locals: Vec<Vec<DescriptorSet>> = train
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<Vec<DescriptorSet>> {
            let work = work_image(&train.load(e)?.pixels, cfg);
            let mut rng = stream_rng(base, i);
            Ok(parts
                .iter()
                .map(|p| subsample_set(&dense_dd(&work, p, cfg.color_step, &cfg.color_patch_sides), share, &mut rng))
                .collect())
        })
        .collect::<Result<_>>()?;
    for (j, &r) in sizes.iter().enumerate() {
        let mut pool = DescriptorSet::new(r);
        for l in &locals {
            pool.extend(&l[j]);
        }
        let bow = fit_bow(&pool, cfg, sub_seed(seed, &format!("dd{r}-bow")))?;
        bow.to_container(ModelKind::Kmeans).save(&ws.model(&format!("dd{r}_bow.stym")))?;
    }
    Ok(())
}

/// Trains the network on the rotated and mirrored training split. Images are
/// downsized to the network input first and augmented on the fly.
pub fn train_cnn(ws: &Workspace, manifest: &Manifest, cfg: &PipelineConfig, seed: u64) -> Result<NetParams<f32>> {
    let train = split_fixed(manifest)?.train;
    let side = cfg.cnn_input_side;
    let small: Vec<(RgbImage, usize)> = train
        .entries
        .par_iter()
        .map(|e| -> Result<(RgbImage, usize)> {
            let img = train.load(e)?;
            Ok((img.pixels.resize(side, side), img.label.expect("labelled").index()))
        })
        .collect::<Result<_>>()?;
    let flips = if cfg.augment_flip { 2 } else { 1 };
    let per = cfg.augment_angles.len() * flips;
    let net = cfg.net_config(sub_seed(seed, "cnn-init"));
    let params = NetParams::<f32>::init(&net)?;
    log::info!("cnn: {} training inputs after augmentation", small.len() * per);
    let outcome = train_with(
        params,
        &net,
        &cfg.schedule(),
        small.len() * per,
        |i| {
            let (img, label) = &small[i / per];
            let j = i % per;
            let mut a = img.rotate(cfg.augment_angles[j / flips]);
            if j % flips == 1 {
                a = a.flip_horizontal();
            }
            (image_to_input(&a, side), *label)
        },
        sub_seed(seed, "cnn-sgd"),
    )?;
    ws.dir("models")?;
    save_params(&outcome.params, &net, &ws.model("dunnet.dnn"))?;
    write_log(&outcome.log, &ws.model("dunnet_log.csv"))?;
    Ok(outcome.params)
}

/// Trained encoders for a feature list.
pub struct Encoders {
    cfg: PipelineConfig,
    features: Vec<Feature>,
    gmm: Option<GmmModel>,
    cn: Option<(ColorNameTable, KmeansModel)>,
    dd: BTreeMap<usize, (DdPartition, KmeansModel)>,
    rcc: Option<ColorCodebook>,
    cnn: Option<(NetParams<f32>, NetConfig)>,
}

impl Encoders {
    pub fn load(ws: &Workspace, cfg: &PipelineConfig, features: &[Feature]) -> Result<Self> {
        let kmeans = |name: &str| -> Result<KmeansModel> { KmeansModel::from_container(&Container::load(&ws.model(name))?.expect(ModelKind::Kmeans)?) };
        let mut enc = Encoders {
            cfg: cfg.clone(),
            features: features.to_vec(),
            gmm: None,
            cn: None,
            dd: BTreeMap::new(),
            rcc: None,
            cnn: None,
        };
        for &f in features {
            match f {
                Feature::IfvSift => enc.gmm = Some(GmmModel::from_container(&Container::load(&ws.model("gmm.stym"))?.expect(ModelKind::Gmm)?)?),
                Feature::Cn11 => enc.cn = Some((load_cn_table(cfg)?, kmeans("cn_bow.stym")?)),
                Feature::Dd25 | Feature::Dd50 => {
                    let r = f.dd_categories().expect("dd feature");
                    let part = DdPartition::from_container(&Container::load(&ws.model(&format!("dd{r}_partition.stym")))?.expect(ModelKind::DdPartition)?)?;
                    enc.dd.insert(r, (part, kmeans(&format!("dd{r}_bow.stym"))?));
                }
                Feature::Rcc => {
                    enc.rcc = Some(ColorCodebook::from_container(&Container::load(&ws.model("rcc_codebook.stym"))?.expect(ModelKind::ColorCodebook)?)?)
                }
                Feature::Dunnet => {
                    let path = ws.model("dunnet.dnn");
                    require(&path)?;
                    enc.cnn = Some(load_params(&path)?);
                }
            }
        }
        Ok(enc)
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    /// One vector per feature, in the order the encoders were loaded.
    pub fn encode(&self, img: &RgbImage) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        let work = work_image(img, cfg);
        self.features
            .iter()
            .map(|&f| {
                Ok(match f {
                    Feature::IfvSift => {
                        let set = dense_sift(&to_grayscale(&work), cfg.sift_step, cfg.sift_scales);
                        ifv_normalize(&fisher_vector(&set, self.gmm.as_ref().expect("loaded"), cfg.posterior)?).values
                    }
                    Feature::Cn11 => {
                        let (table, bow) = self.cn.as_ref().expect("loaded");
                        bow_encode(&dense_cn(&work, table, cfg.color_step, &cfg.color_patch_sides), bow)?.values
                    }
                    Feature::Dd25 | Feature::Dd50 => {
                        let (part, bow) = &self.dd[&f.dd_categories().expect("dd feature")];
                        bow_encode(&dense_dd(&work, part, cfg.color_step, &cfg.color_patch_sides), bow)?.values
                    }
                    Feature::Rcc => rcc_descriptor(&work, self.rcc.as_ref().expect("loaded"), cfg.rcc_grid)?.values,
                    Feature::Dunnet => {
                        let (params, net) = self.cnn.as_ref().expect("loaded");
                        let input = image_to_input::<f32>(img, net.input_side);
                        extract_codes(params, net, &[input])?.remove(0).values
                    }
                })
            })
            .collect()
    }

    /// Encodes many images, one matrix per feature with a row per image.
    pub fn encode_batch(&self, images: &[RgbImage]) -> Result<BTreeMap<Feature, Array2<f64>>> {
        let vectors: Vec<Vec<Vec<f64>>> = images.par_iter().map(|img| self.encode(img)).collect::<Result<_>>()?;
        stack(&self.features, vectors)
    }
}

fn stack(features: &[Feature], vectors: Vec<Vec<Vec<f64>>>) -> Result<BTreeMap<Feature, Array2<f64>>> {
    let n = vectors.len();
    let mut out = BTreeMap::new();
    for (j, &f) in features.iter().enumerate() {
        let dim = vectors.first().map_or(0, |v| v[j].len());
        let mut flat = Vec::with_capacity(n * dim);
        for v in &vectors {
            if v[j].len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: v[j].len(),
                });
            }
            flat.extend_from_slice(&v[j]);
        }
        out.insert(f, Array2::from_shape_vec((n, dim), flat).expect("rectangular"));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    label: EraLabel,
    split: Split,
}

/// Encoded train, test and validation rows, one matrix per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub labels: Vec<EraLabel>,
    pub splits: Vec<Split>,
    pub matrices: BTreeMap<Feature, Array2<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn matrix(&self, f: Feature) -> Result<&Array2<f64>> {
        self.matrices
            .get(&f)
            .ok_or_else(|| Error::MissingModel(format!("features for {f}; run encode first")))
    }

    /// Row indices of `split` whose label belongs to `task`, with task class indices.
    pub fn task_rows(&self, task: &Task, splits: &[Split]) -> (Vec<usize>, Vec<usize>) {
        (0..self.len())
            .filter(|&i| splits.contains(&self.splits[i]))
            .filter_map(|i| task.class_index(self.labels[i]).map(|c| (i, c)))
            .unzip()
    }

    /// Writes `index.csv` plus one matrix file per feature. Existing matrices
    /// of other features are left alone.
    pub fn save(&self, ws: &Workspace) -> Result<()> {
        ws.dir("features")?;
        let mut w = csv::Writer::from_path(ws.features("index.csv"))?;
        for i in 0..self.len() {
            w.serialize(IndexRow {
                id: self.ids[i].clone(),
                label: self.labels[i],
                split: self.splits[i],
            })?;
        }
        w.flush()?;
        for (f, m) in &self.matrices {
            Container::new(ModelKind::Matrix, m.nrows(), m.ncols(), m.iter().copied().collect())
                .save(&ws.features(&format!("{}.stym", f.name())))?;
        }
        Ok(())
    }

    pub fn load(ws: &Workspace, features: &[Feature]) -> Result<Self> {
        let index = ws.features("index.csv");
        require(&index)?;
        let mut table = FeatureTable {
            ids: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
            matrices: BTreeMap::new(),
        };
        for row in csv::Reader::from_path(&index)?.deserialize::<IndexRow>() {
            let row = row?;
            table.ids.push(row.id);
            table.labels.push(row.label);
            table.splits.push(row.split);
        }
        for &f in features {
            let c = Container::load(&ws.features(&format!("{}.stym", f.name())))?.expect(ModelKind::Matrix)?;
            let (n, d) = (c.k as usize, c.d as usize);
            if n != table.len() {
                return Err(Error::DimMismatch {
                    expected: table.len(),
                    found: n,
                });
            }
            table.matrices.insert(f, Array2::from_shape_vec((n, d), c.payload).expect("checked length"));
        }
        Ok(table)
    }
}

/// Encodes every labelled train, test and validation row of the manifest.
pub fn encode(ws: &Workspace, manifest: &Manifest, cfg: &PipelineConfig, features: &[Feature]) -> Result<FeatureTable> {
    let split = split_fixed(manifest)?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.label.is_some() && e.split != Split::Predict)
        .collect();
    debug_assert_eq!(entries.len(), split.train.entries.len() + split.test.entries.len() + split.val.entries.len());
    let enc = Encoders::load(ws, cfg, features)?;
    let vectors: Vec<Vec<Vec<f64>>> = entries
        .par_iter()
        .map(|e| enc.encode(&manifest.load(e)?.pixels))
        .collect::<Result<_>>()?;
    let table = FeatureTable {
        ids: entries.iter().map(|e| e.id()).collect(),
        labels: entries.iter().map(|e| e.label.expect("filtered")).collect(),
        splits: entries.iter().map(|e| e.split).collect(),
        matrices: stack(features, vectors)?,
    };
    table.save(ws)?;
    Ok(table)
}

/// Kernel of one feature. IFV vectors are signed and use a linear kernel;
/// the histogram-like features use the exponential chi-square kernel.
pub fn feature_kernel(f: Feature, train: &Array2<f64>, eval: &Array2<f64>, gamma: Option<f64>) -> Result<KernelMatrix> {
    match f {
        Feature::IfvSift => linear_kernel(train.view(), eval.view()),
        _ => chi2_kernel(train.view(), eval.view(), gamma.map_or(Gamma::Auto, Gamma::Fixed)),
    }
}

/// Weighted mean of the component kernels of a row. Returns the kernel and
/// the gamma of every component (0 for linear ones).
pub fn row_kernel(
    row: &Row,
    train: &BTreeMap<Feature, Array2<f64>>,
    eval: &BTreeMap<Feature, Array2<f64>>,
    gammas: Option<&[f64]>,
    cfg: &PipelineConfig,
) -> Result<(KernelMatrix, Vec<f64>)> {
    let mut kernels = Vec::with_capacity(row.0.len());
    for (j, f) in row.0.iter().enumerate() {
        let missing = || Error::MissingModel(format!("features for {f}"));
        let (x, y) = (train.get(f).ok_or_else(missing)?, eval.get(f).ok_or_else(missing)?);
        kernels.push(feature_kernel(*f, x, y, gammas.map(|g| g[j]))?);
    }
    let used: Vec<f64> = kernels.iter().map(|k| k.gamma).collect();
    if kernels.len() == 1 {
        return Ok((kernels.remove(0), used));
    }
    let weights = row_weights(row, cfg);
    let refs: Vec<&KernelMatrix> = kernels.iter().collect();
    Ok((combine_kernels(&refs, Some(&weights))?, used))
}

fn row_weights(row: &Row, cfg: &PipelineConfig) -> Vec<f64> {
    row.0.iter().map(|f| cfg.kernel_weights.get(f.name()).copied().unwrap_or(1.0)).collect()
}

fn select_rows(table: &FeatureTable, row: &Row, idx: &[usize]) -> Result<BTreeMap<Feature, Array2<f64>>> {
    row.0.iter().map(|&f| Ok((f, table.matrix(f)?.select(Axis(0), idx)))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub row: String,
    pub task: String,
    pub classes: Vec<EraLabel>,
    pub c: f64,
    pub gammas: Vec<f64>,
    pub weights: Vec<f64>,
    /// Feature-table rows the kernel columns refer to.
    pub train_rows: Vec<usize>,
    /// `(C, correct)` on the validation split; empty without one.
    pub validation: Vec<(f64, usize)>,
    pub validation_total: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: OvaModel,
    pub meta: ClassifierMeta,
}

impl TrainedClassifier {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.to_container().save(&dir.join("ova.stym"))?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        require(&meta_path)?;
        let meta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let model = OvaModel::from_container(&Container::load(&dir.join("ova.stym"))?.expect(ModelKind::Ova)?)?;
        Ok(Self { model, meta })
    }

    /// Task class indices for evaluated rows given per-feature matrices.
    pub fn predict(&self, row: &Row, table: &FeatureTable, eval: &BTreeMap<Feature, Array2<f64>>, cfg: &PipelineConfig) -> Result<Vec<usize>> {
        let train = select_rows(table, row, &self.meta.train_rows)?;
        let (k, _) = row_kernel(row, &train, eval, Some(&self.meta.gammas), cfg)?;
        Ok(self.model.predict_all(&k))
    }
}

/// One-vs-all SVMs on the training split. C maximizes validation accuracy,
/// then training accuracy, then comes first in the grid.
pub fn fit_classifier(table: &FeatureTable, row: &Row, task: &Task, cfg: &PipelineConfig) -> Result<TrainedClassifier> {
    let classes = task.classes();
    let (train_idx, train_y) = table.task_rows(task, &[Split::Train]);
    let (val_idx, val_y) = table.task_rows(task, &[Split::Val]);
    let train = select_rows(table, row, &train_idx)?;
    let (k_train, gammas) = row_kernel(row, &train, &train, None, cfg)?;
    let mut validation = Vec::new();
    let model = if val_idx.is_empty() {
        ova_train(&k_train, &train_y, classes.len(), cfg.svm_c_fallback)?
    } else {
        let (k_val, _) = row_kernel(row, &train, &select_rows(table, row, &val_idx)?, Some(&gammas), cfg)?;
        let mut best: Option<(OvaModel, (usize, usize))> = None;
        for &c in &cfg.svm_c_grid {
            let m = ova_train(&k_train, &train_y, classes.len(), c)?;
            let correct = m.predict_all(&k_val).iter().zip(&val_y).filter(|(p, t)| p == t).count();
            let fit = m.predict_all(&k_train).iter().zip(&train_y).filter(|(p, t)| p == t).count();
            validation.push((c, correct));
            // small validation sets tie often; training accuracy breaks the tie
            if best.as_ref().is_none_or(|b| (correct, fit) > b.1) {
                best = Some((m, (correct, fit)));
            }
        }
        best.expect("nonempty grid").0
    };
    let c = model.models[0].c;
    Ok(TrainedClassifier {
        model,
        meta: ClassifierMeta {
            row: row.name(),
            task: task.name(),
            classes,
            c,
            gammas,
            weights: row_weights(row, cfg),
            train_rows: train_idx,
            validation,
            validation_total: val_idx.len(),
        },
    })
}

fn row_features(rows: &[Row]) -> Vec<Feature> {
    let mut f: Vec<Feature> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    f.sort();
    f.dedup();
    f
}

/// Trains and saves a classifier for every row and task.
pub fn train_svm(ws: &Workspace, cfg: &PipelineConfig, rows: &[Row], tasks: &[Task]) -> Result<()> {
    let table = FeatureTable::load(ws, &row_features(rows))?;
    let cells: Vec<(&Task, &Row)> = tasks.iter().flat_map(|t| rows.iter().map(move |r| (t, r))).collect();
    cells.par_iter().try_for_each(|&(task, row)| {
        let trained = fit_classifier(&table, row, task, cfg)?;
        log::info!("{} / {}: C = {}", task, row.name(), trained.meta.c);
        trained.save(&ws.classifier(task, row))
    })
}

/// Test-split accuracy of every saved classifier.
pub fn evaluate(ws: &Workspace, cfg: &PipelineConfig, rows: &[Row], tasks: &[Task], seed: u64) -> Result<AccuracyReport> {
    let table = FeatureTable::load(ws, &row_features(rows))?;
    let cells: Vec<(&Task, &Row)> = tasks.iter().flat_map(|t| rows.iter().map(move |r| (t, r))).collect();
    let cells = cells
        .par_iter()
        .map(|&(task, row)| {
            let clf = TrainedClassifier::load(&ws.classifier(task, row))?;
            let (test_idx, test_y) = table.task_rows(task, &[Split::Test]);
            let pred = clf.predict(row, &table, &select_rows(&table, row, &test_idx)?, cfg)?;
            let correct = pred.iter().zip(&test_y).filter(|(p, t)| p == t).count();
            Cell::new(row.name(), task.name(), correct, test_y.len())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AccuracyReport {
        seed,
        profile: cfg.profile.clone(),
        rows: rows.iter().map(Row::name).collect(),
        tasks: tasks.iter().map(Task::name).collect(),
        cells,
    };
    report.save(&ws.reports(), "table1")?;
    Ok(report)
}

/// Accuracy against training-set size on the pooled train and test rows.
/// The pool kernel is computed once, with gammas from the whole pool; C
/// comes from the saved classifier of the same row and task when present.
pub fn learning_curve(
    ws: &Workspace,
    cfg: &PipelineConfig,
    row: &Row,
    task: &Task,
    fractions: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<LearningCurveReport> {
    if repetitions == 0 || fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::InvalidArgument("fractions must lie in (0, 1) and repetitions be positive".into()));
    }
    let table = FeatureTable::load(ws, &row.0)?;
    let (pool, labels) = table.task_rows(task, &[Split::Train, Split::Test]);
    let mats = select_rows(&table, row, &pool)?;
    let (k, _) = row_kernel(row, &mats, &mats, None, cfg)?;
    let c = TrainedClassifier::load(&ws.classifier(task, row)).map_or(cfg.svm_c_fallback, |t| t.meta.c);
    let classes = task.classes().len();
    let partitions = learning_curve_partitions(&labels, fractions, repetitions, sub_seed(seed, "learning-curve"));
    let mut points = Vec::with_capacity(fractions.len());
    for (&fraction, parts) in fractions.iter().zip(&partitions) {
        let runs = parts
            .par_iter()
            .map(|(tr, te)| -> Result<(usize, usize)> {
                let y: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
                let model = ova_train(&k.select(tr, tr), &y, classes, c)?;
                let pred = model.predict_all(&k.select(te, tr));
                Ok((pred.iter().zip(te).filter(|(p, &i)| **p == labels[i]).count(), te.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(CurvePoint::from_runs(fraction, parts[0].0.len(), runs)?);
    }
    let report = LearningCurveReport {
        seed,
        row: row.name(),
        task: task.name(),
        pool_size: pool.len(),
        repetitions,
        c,
        points,
    };
    report.save(&ws.reports(), &format!("learning_curve_{}_{}", task.name(), row.name()))?;
    Ok(report)
}

/// Crop classifier backed by saved encoders and SVMs.
pub struct PipelineClassifier {
    cfg: PipelineConfig,
    row: Row,
    encoders: Encoders,
    table: FeatureTable,
    models: BTreeMap<Task, TrainedClassifier>,
}

impl PipelineClassifier {
    /// Loads the six-class model and, for binary voting, the pair model.
    pub fn load(ws: &Workspace, cfg: &PipelineConfig, row: &Row, modes: &[VoteMode]) -> Result<Self> {
        let mut models = BTreeMap::new();
        for mode in modes {
            let task = mode_task(*mode)?;
            models.insert(task, TrainedClassifier::load(&ws.classifier(&task, row))?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            row: row.clone(),
            encoders: Encoders::load(ws, cfg, &row.0)?,
            table: FeatureTable::load(ws, &row.0)?,
            models,
        })
    }
}

fn mode_task(mode: VoteMode) -> Result<Task> {
    match mode {
        VoteMode::Multiclass => Ok(Task::SixClass),
        VoteMode::Binary(a, b) => Task::pair(a, b),
    }
}

impl CropClassifier for PipelineClassifier {
    fn sample_side(&self) -> usize {
        self.cfg.sample_side
    }

    fn classify(&self, crops: &[RgbImage], mode: VoteMode) -> Result<Vec<usize>> {
        let task = mode_task(mode)?;
        let clf = self
            .models
            .get(&task)
            .ok_or_else(|| Error::MissingModel(format!("classifier for {task}")))?;
        let eval = self.encoders.encode_batch(crops)?;
        let pred = clf.predict(&self.row, &self.table, &eval, &self.cfg)?;
        let classes = task.classes();
        Ok(pred.into_iter().map(|p| classes[p].index()).collect())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatingOutcome {
    pub id: String,
    pub truth: Option<EraLabel>,
    pub winner: EraLabel,
    pub winner_votes: usize,
    pub total: usize,
    #[serde(skip)]
    pub tally: VoteTally,
}

fn report_stem(id: &str) -> String {
    let p = Path::new(id);
    p.with_extension("").to_string_lossy().replace(['/', '\\'], "_")
}

/// Votes over 100 crops of every predict row and writes one JSON and one
/// histogram file per painting plus `summary.json`.
pub fn date(ws: &Workspace, paintings: &Manifest, cfg: &PipelineConfig, row: &Row, mode: VoteMode, seed: u64) -> Result<Vec<DatingOutcome>> {
    let entries: Vec<_> = paintings.entries.iter().filter(|e| e.split == Split::Predict).collect();
    if entries.is_empty() {
        return Err(Error::MissingSplit("predict".into()));
    }
    let classifier = PipelineClassifier::load(ws, cfg, row, &[mode])?;
    let dir = ws.reports().join("dating");
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let img = paintings.load(e)?;
        let tally = date_painting(&img, &classifier, mode, sub_seed(seed, &img.id))?;
        save_report(&DatingReport::new(&img.id, &tally), &tally, &dir, &report_stem(&img.id))?;
        let winner = tally.winner_era().expect("six-class tally");
        log::info!("{}: {} with {}/{} votes", img.id, winner, tally.votes[tally.winner], tally.total);
        out.push(DatingOutcome {
            id: img.id.clone(),
            truth: img.label,
            winner,
            winner_votes: tally.votes[tally.winner],
            total: tally.total,
            tally,
        });
    }
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(out)
}

/// Row used for dating: the configured one if its features were trained,
/// otherwise the combination of every feature.
pub fn dating_row(cfg: &PipelineConfig, features: &[Feature]) -> Result<Row> {
    let row: Row = cfg.date_row.parse()?;
    if row.is_subset_of(features) {
        Ok(row)
    } else {
        Ok(Row(features.to_vec()))
    }
}

/// Trains whatever encoders `features` need.
pub fn train_encoders(ws: &Workspace, manifest: &Manifest, cfg: &PipelineConfig, features: &[Feature], seed: u64, timings: &mut Timings) -> Result<()> {
    timings.time("extract", || extract(ws, manifest, cfg, features, seed))?;
    if features.contains(&Feature::IfvSift) {
        timings.time("train-gmm", || train_gmm(ws, cfg, seed).map(drop))?;
    }
    if needs_color_books(features) {
        timings.time("train-codebook", || train_codebooks(ws, manifest, cfg, features, seed))?;
    }
    if features.contains(&Feature::Dunnet) {
        timings.time("train-cnn", || train_cnn(ws, manifest, cfg, seed).map(drop))?;
    }
    Ok(())
}

/// Runs every stage an experiment needs and returns its accuracy report.
///
/// Learning curves report one cell per fraction with correct and total
/// summed over repetitions. Dating reports a single `date` cell over the
/// labelled predict rows.
pub fn run_experiment(spec: &ExperimentSpec, cfg: &PipelineConfig) -> Result<AccuracyReport> {
    spec.validate()?;
    let ws = Workspace::new(&spec.out);
    std::fs::create_dir_all(ws.root())?;
    std::fs::write(ws.root().join("config.toml"), cfg.to_toml())?;
    let manifest = load_manifest(&spec.manifest)?;
    if let ExperimentTask::Pair(a, b) = spec.task {
        pair_dataset(&manifest, a, b)?;
    }
    let mut timings = Timings::start();
    let features = &spec.features;
    train_encoders(&ws, &manifest, cfg, features, spec.seed, &mut timings)?;
    timings.time("encode", || encode(&ws, &manifest, cfg, features).map(drop))?;
    let rows = table_rows(features, &cfg.combinations)?;
    let mut report = AccuracyReport {
        seed: spec.seed,
        profile: cfg.profile.clone(),
        rows: rows.iter().map(Row::name).collect(),
        tasks: Vec::new(),
        cells: Vec::new(),
    };
    match spec.task {
        ExperimentTask::Multiclass | ExperimentTask::Pair(..) | ExperimentTask::Table => {
            let tasks = spec.tasks();
            timings.time("train-svm", || train_svm(&ws, cfg, &rows, &tasks))?;
            report = timings.time("evaluate", || evaluate(&ws, cfg, &rows, &tasks, spec.seed))?;
        }
        ExperimentTask::LearningCurve => {
            let task = Task::SixClass;
            timings.time("train-svm", || train_svm(&ws, cfg, &rows, &[task]))?;
            for row in &rows {
                let curve = timings.time(&format!("learning-curve {}", row.name()), || {
                    learning_curve(&ws, cfg, row, &task, &cfg.lc_fractions, cfg.lc_repetitions, spec.seed)
                })?;
                for p in &curve.points {
                    let name = format!("{}@{:.2}", task.name(), p.fraction);
                    if !report.tasks.contains(&name) {
                        report.tasks.push(name.clone());
                    }
                    let correct = p.runs.iter().map(|r| r.0).sum();
                    let total = p.runs.iter().map(|r| r.1).sum();
                    report.cells.push(Cell::new(row.name(), name, correct, total)?);
                }
            }
            report.save(&ws.reports(), "learning_curve_summary")?;
        }
        ExperimentTask::Date => {
            let row = dating_row(cfg, features)?;
            timings.time("train-svm", || train_svm(&ws, cfg, std::slice::from_ref(&row), &[Task::SixClass]))?;
            let paintings = match &spec.paintings {
                Some(p) => load_manifest(p)?,
                None => manifest.clone(),
            };
            let outcomes = timings.time("date", || date(&ws, &paintings, cfg, &row, VoteMode::Multiclass, spec.seed))?;
            let labelled: Vec<_> = outcomes.iter().filter(|o| o.truth.is_some()).collect();
            report.rows = vec![row.name()];
            report.tasks = vec!["date".into()];
            if !labelled.is_empty() {
                let correct = labelled.iter().filter(|o| o.truth == Some(o.winner)).count();
                report.cells.push(Cell::new(row.name(), "date", correct, labelled.len())?);
            }
            report.save(&ws.reports(), "dating")?;
        }
    }
    timings.save(&ws.root().join("timings.json"))?;
    Ok(report)
}
