use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fluoromap::classify::{self, flag_confusable_pairs};
use fluoromap::colorspace::{absolute_ev, luminous_exposure};
use fluoromap::fingerprint::library::{self as lib, CovarianceSource};
use fluoromap::fingerprint::{extract_all, write_fingerprint_csv, ExtractOptions, FeatureEncoding};
use fluoromap::ingest::{load_manifest, ImageStack, StackManifest};
use fluoromap::metrics::{
    area_ratio_iou, detection_confusion, scores, size_category_counts, write_area_table, Detection, ReferenceMethod,
};
use fluoromap::pipeline::{prepare_stack, segment_stack};
use fluoromap::segment::{
    label_map_to_image, load_label_map, mask_to_image, write_region_csv, FeatureSpace, LabelMap, SegmentationConfig,
};
use fluoromap::synth::{self, SynthClassSpec, SynthSceneSpec};
use image::{EncodableLayout, ImageBuffer, ImageFormat, PixelWithColorType};
use serde::{Deserialize, Serialize};

use crate::files::{class_table_csv, read_area_table, read_class_table, FingerprintSet};
use crate::run_log::RunLog;
use crate::{CovarianceArg, GlobalOpts, Preset, Reference, SegmentArgs, Space};

const SIZE_THRESHOLDS_PX: [u32; 3] = [10, 50, 100];

/// Files are staged in memory and written only once the whole command has
/// succeeded, so a failing command leaves nothing behind.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn png<P>(&mut self, name: &str, img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
    where
        P: PixelWithColorType,
        [P::Subpixel]: EncodableLayout,
    {
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .with_context(|| format!("encoding {name}"))?;
        self.add(name, buf.into_inner());
        Ok(())
    }

    fn commit(self, log: &mut RunLog) -> Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            log.output(name);
        }
        let path = log.write(&self.dir)?;
        log::info!("run log: {}", path.display());
        Ok(())
    }
}

fn seg_config(g: &GlobalOpts, args: &SegmentArgs) -> Result<SegmentationConfig> {
    let mut cfg = match args.preset {
        Some(Preset::Turbid) => SegmentationConfig::turbid(),
        Some(Preset::Small) => SegmentationConfig::small_particles(),
        None => SegmentationConfig::default(),
    };
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if let Some(a) = g.min_area {
        cfg.min_area_px = a;
    }
    cfg.rng_seed = g.seed;
    cfg.feature_space = match args.feature_space {
        Space::Ycbcr => FeatureSpace::Ycbcr,
        Space::Rgb => FeatureSpace::Rgb,
    };
    cfg.fill_holes = !args.no_fill_holes;
    cfg.validate()?;
    Ok(cfg)
}

fn reference_method(r: Reference) -> ReferenceMethod {
    match r {
        Reference::Median => ReferenceMethod::Median,
        Reference::Q1 => ReferenceMethod::FirstQuartile,
    }
}

#[derive(Serialize)]
struct RegistrationRecord {
    enabled: bool,
    max_shift_px: u32,
    crop_origin: [u32; 2],
    width: u32,
    height: u32,
    /// `[dx, dy]` displacement of each condition relative to the mask condition.
    offsets: Vec<[f64; 2]>,
}

fn load_inputs(g: &GlobalOpts, manifest_path: &Path, log: &mut RunLog) -> Result<(StackManifest, ImageStack)> {
    let manifest = load_manifest(manifest_path)?;
    log.input(manifest_path)?;
    for c in &manifest.conditions {
        log.input(&c.image_path)?;
        if let Some(p) = &c.high_ev_companion_path {
            log.input(p)?;
        }
    }
    for w in manifest.warnings() {
        log.warn(w);
    }
    let stack = prepare_stack(&manifest, !g.no_register, g.max_shift)
        .with_context(|| format!("preparing stack `{}`", manifest.name))?;
    for w in &stack.warnings {
        log.warn(w);
    }
    log.config(
        "registration",
        &RegistrationRecord {
            enabled: !g.no_register,
            max_shift_px: g.max_shift,
            crop_origin: [stack.crop_origin.0, stack.crop_origin.1],
            width: stack.width,
            height: stack.height,
            offsets: stack.registration_offsets.iter().map(|&(x, y)| [x, y]).collect(),
        },
    )?;
    Ok((manifest, stack))
}

fn segment_labels(
    g: &GlobalOpts,
    args: &SegmentArgs,
    manifest: &StackManifest,
    stack: &ImageStack,
    log: &mut RunLog,
) -> Result<(fluoromap::segment::BinaryMask, LabelMap)> {
    let cfg = seg_config(g, args)?;
    log.config("segmentation", &cfg)?;
    let seg = segment_stack(stack, manifest, &cfg).context("segmenting the mask condition")?;
    log::info!(
        "k-means: {} iterations, converged {}, particle cluster {}",
        seg.outcome.clustering.iterations,
        seg.outcome.clustering.converged,
        seg.outcome.particle_cluster
    );
    Ok((seg.outcome.mask, seg.labels))
}

pub fn segment(g: &GlobalOpts, args: &SegmentArgs) -> Result<()> {
    let mut log = RunLog::new("segment", g.seed);
    let (manifest, stack) = load_inputs(g, &args.manifest, &mut log)?;
    let (mask, labels) = segment_labels(g, args, &manifest, &stack, &mut log)?;

    let counts = size_category_counts(&labels.regions, &SIZE_THRESHOLDS_PX)?;
    let counts: BTreeMap<String, usize> = counts.into_iter().map(|(t, n)| (format!("at_least_{t}_px"), n)).collect();
    log.config("size_categories", &counts)?;

    let mut out = Outputs::new(&g.output_dir);
    out.png("mask.png", &mask_to_image(&mask))?;
    out.png("labels.png", &label_map_to_image(&labels)?)?;
    let mut csv = Vec::new();
    write_region_csv(&labels.regions, manifest.pixel_scale_um_per_px, &mut csv)?;
    out.add("regions.csv", csv);
    out.commit(&mut log)?;
    println!("{} particles", labels.regions.len());
    Ok(())
}

pub fn extract(
    g: &GlobalOpts,
    args: &SegmentArgs,
    labels_path: Option<&Path>,
    spread: bool,
    pixel_covariance: bool,
) -> Result<()> {
    let mut log = RunLog::new("extract", g.seed);
    let (manifest, stack) = load_inputs(g, &args.manifest, &mut log)?;
    let labels = match labels_path {
        Some(p) => {
            log.input(p)?;
            let labels = load_label_map(p)?;
            ensure!(
                (labels.width, labels.height) == (stack.width, stack.height),
                "label map {} is {}x{} but the prepared stack is {}x{}",
                p.display(),
                labels.width,
                labels.height,
                stack.width,
                stack.height
            );
            labels
        }
        None => segment_labels(g, args, &manifest, &stack, &mut log)?.1,
    };
    let opts = ExtractOptions {
        encoding: if spread { FeatureEncoding::ChromaticWithSpread } else { FeatureEncoding::Chromatic },
        pixel_covariance,
    };
    log.config("encoding", &opts.encoding)?;
    log.config("pixel_covariance", &pixel_covariance)?;
    let fingerprints = extract_all(&stack, &labels.regions, &manifest, opts)?;

    let mut csv = Vec::new();
    write_fingerprint_csv(&fingerprints, &manifest, &mut csv)?;
    let set = FingerprintSet {
        stack_name: manifest.name.clone(),
        manifest_digest: manifest.digest(),
        fingerprints,
    };
    let mut out = Outputs::new(&g.output_dir);
    out.add("fingerprints.json", set.to_json()?.into_bytes());
    out.add("fingerprints.csv", csv);
    out.commit(&mut log)?;
    println!("{} fingerprints", set.fingerprints.len());
    Ok(())
}

pub fn build_library(
    g: &GlobalOpts,
    fingerprints: &[PathBuf],
    classes: &[PathBuf],
    class_names: &[String],
    covariance: CovarianceArg,
    lambda_rel: f64,
) -> Result<()> {
    let mut log = RunLog::new("build-library", g.seed);
    ensure!(
        classes.len() == fingerprints.len() || class_names.len() == fingerprints.len(),
        "give one --classes table or one --class name per --fingerprints file"
    );
    let mut samples: BTreeMap<String, Vec<_>> = BTreeMap::new();
    let mut digest: Option<String> = None;
    for (i, path) in fingerprints.iter().enumerate() {
        log.input(path)?;
        let set = FingerprintSet::load(path)?;
        match &digest {
            None => digest = Some(set.manifest_digest.clone()),
            Some(d) if *d != set.manifest_digest => {
                bail!("{} was measured on a different condition set", path.display())
            }
            _ => {}
        }
        let table = match classes.get(i) {
            Some(c) => {
                log.input(c)?;
                Some(read_class_table(c)?)
            }
            None => None,
        };
        for fp in set.fingerprints {
            let class = match &table {
                Some(t) => match t.get(&fp.region_id) {
                    Some(c) => c.clone(),
                    None => {
                        log.warn(format!("{}: region {} has no class, skipped", path.display(), fp.region_id));
                        continue;
                    }
                },
                None => class_names[i].clone(),
            };
            samples.entry(class).or_default().push(fp);
        }
    }
    let source = match covariance {
        CovarianceArg::Samples => CovarianceSource::Samples,
        CovarianceArg::Pixel => CovarianceSource::PixelLevel,
    };
    log.config("covariance", &source)?;
    log.config("lambda_rel", &lambda_rel)?;
    let library = lib::build_library(&samples, lambda_rel, source, digest.as_deref().unwrap_or_default())?;
    for sig in &library.signatures {
        if sig.sample_count == 1 && source == CovarianceSource::Samples {
            log.warn(format!("class {} has a single sample; its covariance is the ridge only", sig.class_name));
        }
    }

    let mut out = Outputs::new(&g.output_dir);
    out.add("library.toml", library.to_toml_string()?.into_bytes());
    out.commit(&mut log)?;
    println!("{} classes", library.signatures.len());
    Ok(())
}

pub fn classify(g: &GlobalOpts, fingerprints: &Path, library: &Path) -> Result<()> {
    let mut log = RunLog::new("classify", g.seed);
    ensure!(g.tau > 0.0, "--tau must be positive");
    log.input(fingerprints)?;
    log.input(library)?;
    let set = FingerprintSet::load(fingerprints)?;
    let (library, _) = lib::load_library(library, None)?;
    if library.manifest_digest != set.manifest_digest {
        log.warn(format!(
            "library condition set {} differs from the fingerprints' {}",
            library.manifest_digest, set.manifest_digest
        ));
    }
    log.config("tau", &g.tau)?;
    let results = classify::classify_all(&set.fingerprints, &library, g.tau)?;

    let mut csv = Vec::new();
    classify::write_results_csv(&results, &library.class_names(), &mut csv)?;
    let mut out = Outputs::new(&g.output_dir);
    out.add("classification.csv", csv);
    out.commit(&mut log)?;

    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &results {
        *tally.entry(r.label()).or_default() += 1;
    }
    for (class, n) in tally {
        println!("{class}\t{n}");
    }
    Ok(())
}

pub struct EvaluateInputs {
    pub truth_labels: PathBuf,
    pub truth_classes: Option<PathBuf>,
    pub predicted_labels: PathBuf,
    pub predicted_classes: Option<PathBuf>,
    pub match_radius: f64,
    pub areas: Option<PathBuf>,
}

/// Largest-overlap predicted region for every truth region.
fn overlaps(truth: &LabelMap, predicted: &LabelMap) -> BTreeMap<u32, BTreeMap<u32, usize>> {
    let mut out: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&t, &p) in truth.labels.iter().zip(&predicted.labels) {
        if t != 0 && p != 0 {
            *out.entry(t).or_default().entry(p).or_default() += 1;
        }
    }
    out
}

fn fmt_score(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

pub fn evaluate(g: &GlobalOpts, inp: &EvaluateInputs) -> Result<()> {
    let mut log = RunLog::new("evaluate", g.seed);
    log.input(&inp.truth_labels)?;
    log.input(&inp.predicted_labels)?;
    let truth = load_label_map(&inp.truth_labels)?;
    let predicted = load_label_map(&inp.predicted_labels)?;
    ensure!(
        (truth.width, truth.height) == (predicted.width, predicted.height),
        "truth label map is {}x{} but predicted is {}x{}",
        truth.width,
        truth.height,
        predicted.width,
        predicted.height
    );

    let truth_classes = match &inp.truth_classes {
        Some(p) => {
            log.input(p)?;
            Some(read_class_table(p)?)
        }
        None => None,
    };
    let predicted_classes: Option<BTreeMap<u32, Option<String>>> = match &inp.predicted_classes {
        Some(p) => {
            log.input(p)?;
            let file = std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
            Some(classify::read_results_labels(file)?.into_iter().collect())
        }
        None => None,
    };
    // without class tables every particle counts as one generic plastic
    let generic = || Some("particle".to_string());
    let truth_det: Vec<Detection> = truth
        .regions
        .iter()
        .map(|r| {
            let label = match &truth_classes {
                Some(t) => t.get(&r.id).cloned(),
                None => generic(),
            };
            Detection::from_region(r, label)
        })
        .collect();
    let pred_det: Vec<Detection> = predicted
        .regions
        .iter()
        .map(|r| {
            let label = match &predicted_classes {
                Some(t) => t.get(&r.id).cloned().flatten(),
                None => generic(),
            };
            Detection::from_region(r, label)
        })
        .collect();
    log.config("match_radius_px", &inp.match_radius)?;
    let counts = detection_confusion(&pred_det, &truth_det, inp.match_radius);
    let s = scores(&counts);

    let mut report = String::new();
    report.push_str("# standard score definitions; accuracy counts TN, precision is TP/(TP+FP)\n");
    report.push_str(&format!("tp {}\nfp {}\ntn {}\nfn {}\n", counts.tp, counts.fp, counts.tn, counts.fn_));
    for (name, v) in [
        ("iou", s.iou),
        ("accuracy", s.accuracy),
        ("precision", s.precision),
        ("recall", s.recall),
        ("f1", s.f1),
    ] {
        report.push_str(&format!("{name} {}\n", fmt_score(v)));
    }

    let mut metrics = csv::Writer::from_writer(Vec::new());
    metrics.write_record(["tp", "fp", "tn", "fn", "iou", "accuracy", "precision", "recall", "f1"])?;
    let mut row = vec![counts.tp, counts.fp, counts.tn, counts.fn_]
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>();
    row.extend(
        [s.iou, s.accuracy, s.precision, s.recall, s.f1]
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()),
    );
    metrics.write_record(&row)?;

    // per truth particle: predicted area over truth area and pixel overlap
    let ov = overlaps(&truth, &predicted);
    let pred_area: BTreeMap<u32, u32> = predicted.regions.iter().map(|r| (r.id, r.area_px)).collect();
    let mut per = csv::Writer::from_writer(Vec::new());
    per.write_record(["truth_id", "class_name", "truth_area_px", "predicted_area_px", "area_ratio_iou", "pixel_iou"])?;
    for r in &truth.regions {
        let touching: BTreeSet<u32> = ov.get(&r.id).map(|m| m.keys().copied().collect()).unwrap_or_default();
        let p_area: u64 = touching.iter().map(|id| pred_area[id] as u64).sum();
        let inter: u64 = ov.get(&r.id).map(|m| m.values().sum::<usize>() as u64).unwrap_or(0);
        let union = r.area_px as u64 + p_area - inter;
        let ratio = if p_area > 0 { area_ratio_iou(p_area as f64, r.area_px as f64)? } else { 0.0 };
        per.write_record([
            r.id.to_string(),
            truth_classes.as_ref().and_then(|t| t.get(&r.id).cloned()).unwrap_or_default(),
            r.area_px.to_string(),
            p_area.to_string(),
            format!("{ratio:.4}"),
            format!("{:.4}", inter as f64 / union as f64),
        ])?;
    }

    let mut out = Outputs::new(&g.output_dir);
    if let Some(p) = &inp.areas {
        log.input(p)?;
        log.config("reference", &reference_method(g.reference))?;
        let series = read_area_table(p, reference_method(g.reference))?;
        let rows = series
            .iter()
            .map(|s| s.evaluate().with_context(|| format!("particle {}", s.particle_name)))
            .collect::<Result<Vec<_>>>()?;
        let mean = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len().max(1) as f64;
        report.push_str(&format!("area_table_mean_iou {mean:.4}\n"));
        let mut buf = Vec::new();
        write_area_table(&rows, &mut buf)?;
        out.add("area_table.csv", buf);
    }
    out.add("metrics.txt", report.clone().into_bytes());
    out.add("metrics.csv", metrics.into_inner()?);
    out.add("per_particle.csv", per.into_inner()?);
    out.commit(&mut log)?;
    print!("{report}");
    Ok(())
}

pub fn distance_matrix(g: &GlobalOpts, library: &Path, threshold: f64) -> Result<()> {
    let mut log = RunLog::new("distance-matrix", g.seed);
    log.input(library)?;
    let (library, _) = lib::load_library(library, None)?;
    let dm = classify::distance_matrix(&library)?;
    log.config("threshold", &threshold)?;
    let flagged = flag_confusable_pairs(&dm, threshold);

    let mut full = Vec::new();
    dm.write_full_csv(&mut full)?;
    let mut upper = Vec::new();
    dm.write_upper_csv(&mut upper)?;
    let mut pairs = csv::Writer::from_writer(Vec::new());
    pairs.write_record(["class_a", "class_b", "distance"])?;
    for (a, b, d) in &flagged {
        pairs.write_record([a.clone(), b.clone(), format!("{d:.6}")])?;
    }

    let mut out = Outputs::new(&g.output_dir);
    out.add("distance_matrix.csv", full);
    out.add("distance_upper.csv", upper);
    out.add("confusable_pairs.csv", pairs.into_inner()?);
    out.commit(&mut log)?;
    for (a, b, d) in &flagged {
        println!("{a} / {b}\t{d:.3}");
    }
    Ok(())
}

pub struct SynthInputs {
    pub scene: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub n_classes: usize,
    pub per_class: usize,
    pub width: u32,
    pub height: u32,
    pub noise: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ClassFile {
    classes: Vec<SynthClassSpec>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn synth(g: &GlobalOpts, inp: &SynthInputs) -> Result<()> {
    let mut log = RunLog::new("synth", g.seed);
    let mut manifest = StackManifest::canonical("synthetic", |i| PathBuf::from(format!("c{i:02}.png")));
    let classes = match &inp.classes {
        Some(p) => {
            log.input(p)?;
            read_toml::<ClassFile>(p)?.classes
        }
        None => synth::demo_classes(inp.n_classes, &manifest, inp.noise),
    };
    let scene = match &inp.scene {
        Some(p) => {
            log.input(p)?;
            let mut s: SynthSceneSpec = read_toml(p)?;
            s.rng_seed = g.seed;
            s
        }
        None => synth::demo_scene(inp.width, inp.height, &classes, inp.per_class, g.seed),
    };
    let generated = synth::generate_stack(&scene, &classes, &manifest)?;
    log.config("scene", &scene)?;

    let mut out = Outputs::new(&g.output_dir);
    for (c, img) in manifest.conditions.iter().zip(&generated.stack.images) {
        out.png(&c.image_path.display().to_string(), img)?;
    }
    manifest.name = format!("synthetic-{}", g.seed);
    out.add("manifest.toml", manifest.to_toml_string()?.into_bytes());
    out.add("classes.toml", toml::to_string(&ClassFile { classes })?.into_bytes());
    out.add("scene.toml", toml::to_string(&scene)?.into_bytes());
    out.png("truth_labels.png", &label_map_to_image(&generated.truth)?)?;
    out.png("truth_mask.png", &mask_to_image(&generated.truth.mask()))?;
    out.add("truth_classes.csv", class_table_csv(&generated.labels)?);
    let mut regions = Vec::new();
    write_region_csv(&generated.truth.regions, manifest.pixel_scale_um_per_px, &mut regions)?;
    out.add("truth_regions.csv", regions);
    out.commit(&mut log)?;
    println!("{} particles, {} conditions", generated.truth.regions.len(), manifest.conditions.len());
    Ok(())
}

pub fn calibrate_ev(lux: f64, shutter: f64, aperture: Option<f64>, iso: f64) -> Result<()> {
    ensure!(lux >= 0.0 && shutter > 0.0, "lux must be non-negative and shutter positive");
    println!("luminous exposure: {} lx·s", round_to(luminous_exposure(lux, shutter), 6));
    if let Some(n) = aperture {
        println!("absolute EV: {:.2}", absolute_ev(n, shutter, iso)?);
    }
    Ok(())
}

fn round_to(v: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (v * p).round() / p
}
