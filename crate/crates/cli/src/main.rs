use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod error;

use error::CliError;

const COMPRESS_HELP: &str = "\
Output:
  a `config:` line with every resolved setting, including the seed
  one `layer` line per compressed layer:
    name role n k used mse_mean mse_top100 frobenius_rel_err
  one `failed` line per unit that could not be compressed

Per-unit training records go to <REPORTS>/<unit>.csv with columns
  epoch,vq_sum,mse_mean,rmse,mse_top100

Exit status: 0 ok, 2 bad configuration, 3 unreadable data,
4 a unit diverged (its best snapshot is still written), 5 corrupt file.";

const STATS_HELP: &str = "\
Columns of each `layer` line:
  name role n d k n_fd ratio_params ratio_bits avg_bits index_bits
The `total` line uses the same columns, counting shared codebooks and
decoders once. Byte sizes are those of the file as written.";

const VERIFY_HELP: &str = "\
Columns of each `layer` line:
  name mse_mean mse_top100 frobenius_rel_err
mse_mean is the mean over length-d subvectors of the squared error.
mse_top100 sums the 100 largest of those errors.";

const HISTOGRAM_HELP: &str = "\
CSV columns: bin_center,count (after a `#` header line).";

const EXPORT_HELP: &str = "\
CSV columns: row,col,original,reconstructed (after a `#` header line).
The default window is the first row, 16 subvectors wide for attention
layers and 8 for MLP layers.";

/// Compress transformer weights into a learned codebook plus a small decoder.
#[derive(Parser)]
#[command(name = "pocketllm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train codebooks for a model and write a pocket file.
    #[command(after_long_help = COMPRESS_HELP)]
    Compress(CompressArgs),
    /// Rebuild weights from a pocket file into a new manifest.
    Decompress {
        file: PathBuf,
        /// Manifest to write; tensors go next to it.
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Compression ratios and sizes of a pocket file.
    #[command(after_long_help = STATS_HELP)]
    Stats {
        file: PathBuf,
        /// Count only linear decoder parameters, leaving out normalization.
        #[arg(long)]
        linear_only: bool,
    },
    /// Compare a pocket file against the original weights.
    #[command(after_long_help = VERIFY_HELP)]
    Verify { manifest: PathBuf, file: PathBuf },
    /// Histogram of one layer's weights.
    #[command(after_long_help = HISTOGRAM_HELP)]
    Histogram {
        manifest: PathBuf,
        #[arg(long)]
        layer: String,
        /// Central fraction of values kept.
        #[arg(long, default_value_t = 0.99)]
        coverage: f64,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Original and reconstructed values over a window of one layer.
    #[command(name = "export-recon", after_long_help = EXPORT_HELP)]
    ExportRecon {
        manifest: PathBuf,
        file: PathBuf,
        #[arg(long)]
        layer: String,
        /// Row range `start:end`.
        #[arg(long, value_parser = parse_range)]
        rows: Option<Range<usize>>,
        /// Column range `start:end`.
        #[arg(long, value_parser = parse_range)]
        cols: Option<Range<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
pub struct CompressArgs {
    pub manifest: PathBuf,
    /// Subvector length; must divide every selected row length.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Codebook size.
    #[arg(long, default_value_t = 4096)]
    pub k: usize,
    /// `all` or a comma list of roles (q,k,v,o,gate,up,down,other).
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// `per_layer` or `per_block`.
    #[arg(long, default_value = "per_layer")]
    pub scope: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, env = "POCKET_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub batch_rows: Option<usize>,
    /// Layers per meta network.
    #[arg(long = "m")]
    pub m: Option<usize>,
    /// Hidden width of the meta networks.
    #[arg(long = "h")]
    pub h: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Pocket file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for training records [default: <OUT>.reports]
    #[arg(long)]
    pub reports: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:end, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad start `{a}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad end `{b}`"))?;
    if a > b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok(a..b)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| error::io_error(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compress(args) => commands::compress(&args),
        Command::Decompress { file, out_manifest } => commands::decompress(&file, &out_manifest),
        Command::Stats { file, linear_only } => commands::stats(&file, linear_only),
        Command::Verify { manifest, file } => commands::verify(&manifest, &file),
        Command::Histogram { manifest, layer, coverage, bins, out } => {
            let csv = commands::histogram(&manifest, &layer, coverage, bins)?;
            write_or_print(out.as_deref(), &csv)
        }
        Command::ExportRecon { manifest, file, layer, rows, cols, out } => {
            let csv = commands::export_recon(&manifest, &file, &layer, rows, cols)?;
            write_or_print(out.as_deref(), &csv)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
