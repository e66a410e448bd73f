use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pocketllm::format::file_layout;
use pocketllm::format::ratio::{compression_ratio_params, LayerBudget};
use pocketllm::metrics::{
    default_window, export_reconstruction, reconstruction_csv, row_sq_errors, sorted_sq_norm, weight_histogram,
    LayerMetrics,
};
use pocketllm::tensor_store::{save_manifest, split_rows, LayerEntry};
use pocketllm::compressor::FailureKind;
use pocketllm::{
    compress_model, load_manifest, load_pocket, reconstruct_layer, save_pocket, CompressConfig, CompressedLayer,
    CompressedModel, LayerFilter, Scope,
};

use crate::error::{io_error, CliError, Status};
use crate::CompressArgs;

fn config_from(args: &CompressArgs) -> Result<CompressConfig, CliError> {
    let mut cfg = CompressConfig::new(args.d, args.k);
    cfg.scope = args.scope.parse::<Scope>().map_err(|e| CliError::new(Status::Config, e))?;
    cfg.seed = args.seed;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.batch_rows {
        cfg.batch_rows = v;
    }
    if let Some(v) = args.m {
        cfg.layers = v;
    }
    if let Some(v) = args.h {
        cfg.hidden = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_line(name: &str, m: &LayerMetrics) -> String {
    format!("{name} {:e} {:e} {:e}", m.mse_mean, m.mse_top100, m.frobenius_rel_err)
}

fn report_file_name(layers: &[String], manifest_blocks: impl Fn(&str) -> Option<u32>, scope: Scope) -> String {
    let stem = match (scope, layers.first()) {
        (Scope::PerBlock, Some(first)) => match manifest_blocks(first) {
            Some(b) => format!("block{b}"),
            None => first.clone(),
        },
        (_, Some(first)) => first.clone(),
        (_, None) => "unit".into(),
    };
    format!("{}.csv", stem.replace(['/', '\\'], "_"))
}

pub fn compress(args: &CompressArgs) -> Result<(), CliError> {
    let filter: LayerFilter = args.layers.parse().map_err(|e: String| CliError::new(Status::Config, e))?;
    let cfg = config_from(args)?;
    let manifest = load_manifest(&args.manifest)?;
    println!("config: {cfg} jobs={}", args.jobs);

    let (model, report) = compress_model(&manifest, &cfg, &filter, args.jobs)?;
    if model.layers.is_empty() && report.failures.is_empty() {
        return Err(CliError::new(Status::Config, format!("no layers match `{}`", args.layers)));
    }

    let reports_dir = args.reports.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".reports");
        PathBuf::from(p)
    });
    fs::create_dir_all(&reports_dir).map_err(|e| io_error(&reports_dir, e))?;
    let block_of = |name: &str| manifest.layer(name).map(|l| l.block_index);
    for unit in &report.units {
        let path = reports_dir.join(report_file_name(&unit.layers, block_of, cfg.scope));
        fs::write(&path, unit.to_records()).map_err(|e| io_error(&path, e))?;
        for (name, m) in unit.layers.iter().zip(&unit.layer_metrics) {
            let role = manifest.layer(name).map(|l| l.role.as_str()).unwrap_or("?");
            println!(
                "layer {name} {role} {} {} {} {:e} {:e} {:e}",
                m.n, unit.k, unit.used_codewords, m.mse_mean, m.mse_top100, m.frobenius_rel_err
            );
        }
    }
    for f in &report.failures {
        let kind = match f.kind {
            FailureKind::Data => "data",
            FailureKind::Diverged => "diverged",
        };
        println!("failed {} {kind}: {}", f.layers.join(","), f.message);
    }

    if !model.layers.is_empty() {
        save_pocket(&args.out, &model)?;
        let bytes = fs::metadata(&args.out).map_err(|e| io_error(&args.out, e))?.len();
        println!("wrote {} ({bytes} bytes, {} layers)", args.out.display(), model.layers.len());
    }
    if report.failures.iter().any(|f| f.kind == FailureKind::Data) {
        Err(CliError::new(Status::Data, format!("{} unit(s) failed", report.failures.len())))
    } else if !report.failures.is_empty() {
        Err(CliError::new(Status::Diverged, format!("{} unit(s) diverged", report.failures.len())))
    } else {
        Ok(())
    }
}

pub fn decompress(file: &Path, out_manifest: &Path) -> Result<(), CliError> {
    let model = load_pocket(file)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let entry = LayerEntry {
            name: l.meta.name.clone(),
            role: l.meta.role,
            block_index: l.meta.block,
            d_in: l.meta.d_in,
            d_out: l.meta.d_out,
            data_path: String::new(),
        };
        layers.push((entry, reconstruct_layer(l)?));
    }
    save_manifest(out_manifest, layers.iter().map(|(e, w)| (e, w)))?;
    println!("wrote {} ({} layers)", out_manifest.display(), layers.len());
    Ok(())
}

type Group = (*const (), *const ());

fn group_of(l: &CompressedLayer) -> Group {
    (Arc::as_ptr(&l.codebook) as *const (), Arc::as_ptr(&l.decoder) as *const ())
}

/// Totals over a model, with each shared codebook and decoder counted once.
struct Totals {
    weights: u128,
    params: u128,
    bits: u128,
    index_bits: u128,
}

fn totals(model: &CompressedModel, linear_only: bool) -> Totals {
    let mut seen: HashSet<Group> = HashSet::new();
    let mut t = Totals { weights: 0, params: 0, bits: 0, index_bits: 0 };
    for l in &model.layers {
        let b = l.budget(linear_only);
        let idx = u128::from(index_width(b.k));
        t.weights += u128::from(b.n) * u128::from(b.d);
        t.params += u128::from(b.n);
        t.bits += idx * u128::from(b.n);
        t.index_bits += idx * u128::from(b.n);
        if seen.insert(group_of(l)) {
            t.params += u128::from(b.k) * u128::from(b.d) + u128::from(b.n_fd);
            t.bits += 16 * u128::from(b.k) * u128::from(b.d) + 32 * u128::from(b.n_fd);
        }
    }
    t
}

fn index_width(k: u64) -> u32 {
    pocketllm::format::bitpack::index_bits(k).expect("codebook sizes in a loaded file are valid")
}

fn stats_line(label: &str, weights: u128, params: u128, bits: u128, index_bits: u128) -> String {
    format!(
        "{label} {:.4} {:.4} {:.4} {:.4}",
        weights as f64 / params as f64,
        32.0 * weights as f64 / bits as f64,
        bits as f64 / weights as f64,
        index_bits as f64 / weights as f64
    )
}

pub fn stats(file: &Path, linear_only: bool) -> Result<(), CliError> {
    let model = load_pocket(file)?;
    let on_disk = fs::metadata(file).map_err(|e| io_error(file, e))?.len();
    println!("scope {}", model.scope);
    for l in &model.layers {
        let b: LayerBudget = l.budget(linear_only);
        let r = compression_ratio_params(b.n, b.d, b.k, b.n_fd);
        let idx = u128::from(index_width(b.k)) * u128::from(b.n);
        let bits = b.compressed_bits()?;
        let label = format!("layer {} {} {} {} {} {}", l.meta.name, l.meta.role, b.n, b.d, b.k, b.n_fd);
        println!("{}", stats_line(&label, u128::from(b.n) * u128::from(b.d), r.denominator, bits, idx));
    }
    if model.layers.is_empty() {
        println!("total (no layers)");
    } else {
        let t = totals(&model, linear_only);
        println!("{}", stats_line("total", t.weights, t.params, t.bits, t.index_bits));
    }
    let layout = file_layout(&model)?;
    println!(
        "bytes file={on_disk} payload={} overhead={} original_f32={}",
        layout.payload_bits().div_ceil(8),
        layout.overhead_bytes(),
        totals(&model, linear_only).weights * 4
    );
    Ok(())
}

fn find<'a>(manifest: &'a pocketllm::ModelManifest, name: &str) -> Result<&'a LayerEntry, CliError> {
    manifest
        .layer(name)
        .ok_or_else(|| CliError::new(Status::Data, format!("layer `{name}` is not in the manifest")))
}

pub fn verify(manifest_path: &Path, file: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(manifest_path)?;
    let model = load_pocket(file)?;
    let mut errs_all = Vec::new();
    let mut norm_all = 0.0;
    for l in &model.layers {
        let entry = find(&manifest, &l.meta.name)?;
        if entry.shape() != (l.meta.d_in, l.meta.d_out) {
            return Err(CliError::new(
                Status::Data,
                format!(
                    "layer `{}`: manifest shape {:?} but file shape {:?}",
                    l.meta.name,
                    entry.shape(),
                    (l.meta.d_in, l.meta.d_out)
                ),
            ));
        }
        let w = manifest.load_weights(entry)?;
        let w_hat = reconstruct_layer(l)?;
        let s = split_rows(&w, l.d, &l.meta.name)?;
        let s_hat = split_rows(&w_hat, l.d, &l.meta.name)?;
        let errs = row_sq_errors(&s.data, &s_hat.data);
        let norm = sorted_sq_norm(&s.data);
        errs_all.extend_from_slice(&errs);
        norm_all += norm;
        println!("layer {}", metrics_line(&l.meta.name, &LayerMetrics::from_terms(errs, Vec::new(), norm)));
    }
    if !errs_all.is_empty() {
        println!("{}", metrics_line("total", &LayerMetrics::from_terms(errs_all, Vec::new(), norm_all)));
    }
    Ok(())
}

pub fn histogram(manifest_path: &Path, layer: &str, coverage: f64, bins: usize) -> Result<String, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let w = manifest.load_weights(find(&manifest, layer)?)?;
    let h = weight_histogram(w.as_slice(), coverage, bins)?;
    let mut out = String::new();
    let _ = writeln!(out, "# layer={layer} coverage={coverage} kept={}/{} range=[{:e},{:e}]", h.kept, h.total, h.lo, h.hi);
    out.push_str(&h.to_csv());
    Ok(out)
}

pub fn export_recon(
    manifest_path: &Path,
    file: &Path,
    layer: &str,
    rows: Option<Range<usize>>,
    cols: Option<Range<usize>>,
) -> Result<String, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let model = load_pocket(file)?;
    let l = model
        .layers
        .iter()
        .find(|l| l.meta.name == layer)
        .ok_or_else(|| CliError::new(Status::Config, format!("layer `{layer}` is not in {}", file.display())))?;
    let entry = find(&manifest, layer)?;
    let w = manifest.load_weights(entry)?;
    let w_hat = reconstruct_layer(l)?;
    let window = match (rows, cols) {
        (None, None) => None,
        (r, c) => {
            let (dr, dc) = default_window(l.meta.role, l.d, w.shape());
            Some((r.unwrap_or(dr), c.unwrap_or(dc)))
        }
    };
    let points = export_reconstruction(&w, &w_hat, l.meta.role, l.d, window)?;
    Ok(reconstruction_csv(&points))
}
