use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heinfer_core::approx::ReluDegree;
use heinfer_core::calibration::DomainMethod;
use heinfer_core::fixtures::{build_fixture, FixtureName};
use heinfer_core::graph::to_onnx_bytes;
use heinfer_core::harness::{
    fixture_agreement, folding_equivalence, golden_report, lowering_soundness, real_data_experiment,
};
use heinfer_core::params::BackendKind;
use heinfer_core::protocol::{
    cmd_decrypt, cmd_encrypt, cmd_inference, cmd_keygen, cmd_keyparams, thread_cap, write_atomic, write_tensor,
    KeyparamsOptions, ProtocolError,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "heinfer", version, about = "Two-party inference on encrypted inputs (simulated FHE backends)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model owner: calibrate the model and derive key parameters.
    Keyparams {
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short = 'c', long)]
        calibration: PathBuf,
        #[arg(short = 'o', long, default_value = "keyparams.json")]
        output: PathBuf,
        #[command(flatten)]
        opts: BackendArgs,
    },
    /// Data owner: generate the secret and evaluation keys.
    Keygen {
        #[arg(short = 'p', long)]
        params: PathBuf,
        #[arg(long, default_value = "secret.key")]
        secret: PathBuf,
        #[arg(long = "eval", default_value = "eval.key")]
        eval_key: PathBuf,
        /// Derive keys from this seed instead of OS entropy.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Data owner: encrypt an input tensor file.
    Encrypt {
        #[arg(short = 'k', long)]
        key: PathBuf,
        #[arg(short = 'i', long)]
        input: PathBuf,
        #[arg(short = 'o', long)]
        output: PathBuf,
    },
    /// Model owner: evaluate the model on a ciphertext.
    Inference {
        /// Model file (its sidecar is read from next to it) or the sidecar.
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short = 'e', long = "eval")]
        eval_key: PathBuf,
        #[arg(short = 'i', long)]
        input: PathBuf,
        #[arg(short = 'o', long)]
        output: PathBuf,
    },
    /// Data owner: decrypt a result ciphertext into a tensor file.
    Decrypt {
        #[arg(short = 'k', long)]
        key: PathBuf,
        #[arg(short = 'i', long)]
        input: PathBuf,
        #[arg(short = 'o', long)]
        output: PathBuf,
    },
    /// Experiments and self-checks.
    #[command(subcommand)]
    Bench(Bench),
}

#[derive(Subcommand)]
enum Bench {
    /// Computed depths, ring sizes and parameter rows against reference values.
    Golden {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Argmax agreement between cleartext and encrypted inference.
    Agreement {
        #[arg(long, default_value = "cryptonets")]
        fixture: FixtureName,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Seed of the evaluated inputs.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Seed of the fixture weights, calibration set and keys.
        #[arg(long, default_value_t = 1)]
        fixture_seed: u64,
        #[command(flatten)]
        opts: BackendArgs,
        #[arg(long)]
        json: bool,
    },
    /// Lowered plans against the reference forward pass on random instances.
    Soundness {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Folded lookup chains against eager per-op quantization.
    Folding {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 6)]
        msg_bits: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Write a fixture model, its calibration set and sample inputs.
    ExportFixture {
        #[arg(long)]
        fixture: FixtureName,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        inputs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        input_seed: u64,
    },
    /// Accuracy of a trained model on MNIST-format data.
    Real {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        calibration_samples: usize,
        #[command(flatten)]
        opts: BackendArgs,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Ckks,
    Tfhe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Meanstd,
    Minmax,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "ckks")]
    backend: Backend,
    /// Security level in bits.
    #[arg(long = "lambda", default_value_t = 128)]
    lambda_bits: u32,
    /// ReLU polynomial degree (1, 3 or 7).
    #[arg(long, default_value_t = 3, value_parser = parse_degree)]
    relu_degree: u32,
    /// Domain of the ReLU polynomials.
    #[arg(long, value_enum, default_value = "meanstd")]
    domain_method: Domain,
    /// Width in standard deviations for `meanstd` domains.
    #[arg(long, default_value_t = DomainMethod::DEFAULT_K)]
    k: f64,
    /// Quantization domain of TFHE edges.
    #[arg(long, value_enum, default_value = "minmax")]
    tfhe_domain: Domain,
    #[arg(long, default_value_t = 6)]
    msg_bits: u32,
    /// Keep consecutive linear layers as separate steps.
    #[arg(long)]
    no_compose: bool,
}

fn parse_degree(s: &str) -> Result<u32, String> {
    let d: u32 = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    ReluDegree::try_from(d).map(|_| d).map_err(|e| e.to_string())
}

impl BackendArgs {
    fn domain(&self, d: Domain) -> DomainMethod {
        match d {
            Domain::Meanstd => DomainMethod::MeanStd { k: self.k },
            Domain::Minmax => DomainMethod::MinMax,
        }
    }

    fn options(&self) -> KeyparamsOptions {
        KeyparamsOptions {
            backend: match self.backend {
                Backend::Ckks => BackendKind::Ckks,
                Backend::Tfhe => BackendKind::Tfhe,
            },
            lambda_bits: self.lambda_bits,
            relu_degree: ReluDegree::try_from(self.relu_degree).expect("validated by the parser"),
            relu_domain: self.domain(self.domain_method),
            tfhe_domain: self.domain(self.tfhe_domain),
            msg_bits: self.msg_bits,
            compose_linear: !self.no_compose,
        }
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("reports serialize"));
}

fn export_fixture(
    name: FixtureName,
    dir: &Path,
    inputs: usize,
    seed: u64,
    input_seed: u64,
) -> Result<(), ProtocolError> {
    std::fs::create_dir_all(dir).map_err(|e| ProtocolError::input(format!("cannot create {}: {e}", dir.display())))?;
    let fx = build_fixture(name, seed);
    let model = dir.join(format!("{name}.onnx"));
    write_atomic(&model, &to_onnx_bytes(&fx.graph))?;
    let calibration = dir.join(format!("{name}-calibration.zip"));
    write_atomic(&calibration, &fx.calibration.to_zip().map_err(|e| ProtocolError::input(e.to_string()))?)?;
    let mut files = vec![model, calibration];
    for (i, x) in fx.sample_inputs(inputs, input_seed).iter().enumerate() {
        let path = dir.join(format!("{name}-input-{i}.zip"));
        write_tensor(&path, "input", x)?;
        files.push(path);
    }
    print_json(&json!({ "fixture": name.as_str(), "files": files }));
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, ProtocolError> {
    match cli.command {
        Command::Keyparams { model, calibration, output, opts } => {
            let s = cmd_keyparams(&model, &calibration, &output, &opts.options())?;
            print_json(&json!({
                "keyparams": output,
                "sidecar": s.sidecar_path,
                "backend": s.keyparams.backend,
                "d_m": s.depth.d_m,
                "log2_n": s.keyparams.ckks.as_ref().map(|c| c.log2_n),
            }));
        }
        Command::Keygen { params, secret, eval_key, seed } => {
            let key_id = cmd_keygen(&params, &secret, &eval_key, seed)?;
            print_json(&json!({ "key_id": key_id, "secret": secret, "eval": eval_key }));
        }
        Command::Encrypt { key, input, output } => cmd_encrypt(&key, &input, &output)?,
        Command::Inference { model, eval_key, input, output } => {
            print_json(&cmd_inference(&model, &eval_key, &input, &output)?);
        }
        Command::Decrypt { key, input, output } => {
            let y = cmd_decrypt(&key, &input, &output)?;
            print_json(&json!({ "shape": y.shape(), "argmax": y.argmax() }));
        }
        Command::Bench(b) => return bench(b),
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(b: Bench) -> Result<ExitCode, ProtocolError> {
    match b {
        Bench::Golden { seed, json } => {
            let report = golden_report(seed);
            if json {
                print_json(&report);
            } else {
                print!("{report}");
            }
            if !report.all_ok() {
                eprintln!("golden values differ");
                return Ok(ExitCode::FAILURE);
            }
        }
        Bench::Agreement { fixture, samples, seed, fixture_seed, opts, json } => {
            if samples == 0 {
                return Err(ProtocolError::input("--samples must be at least 1"));
            }
            let r = fixture_agreement(&build_fixture(fixture, fixture_seed), &opts.options(), samples, seed)?;
            if json {
                print_json(&r);
            } else {
                print!("{r}");
            }
        }
        Bench::Soundness { instances, seed, json } => {
            let rows = lowering_soundness(instances, seed);
            if json {
                print_json(&rows);
            } else {
                println!("{:<20} {:>9} {:>12}", "case", "instances", "max |err|");
                for r in &rows {
                    println!("{:<20} {:>9} {:>12.3e}", r.case, r.instances, r.max_abs_err);
                }
            }
        }
        Bench::Folding { cases, msg_bits, seed, json } => {
            let r = folding_equivalence(cases, msg_bits, seed);
            if json {
                print_json(&r);
            } else {
                println!(
                    "{} of {} folded chains identical; quantizations per flush {}..={}",
                    r.identical, r.cases, r.min_quantizations_per_flush, r.max_quantizations_per_flush
                );
            }
        }
        Bench::ExportFixture { fixture, dir, inputs, seed, input_seed } => {
            export_fixture(fixture, &dir, inputs, seed, input_seed)?
        }
        Bench::Real { model, mnist_dir, samples, calibration_samples, opts, json } => {
            let r = real_data_experiment(&model, &mnist_dir, &opts.options(), samples, calibration_samples)?;
            if json {
                print_json(&r);
            } else {
                println!(
                    "{} samples: cleartext accuracy {:.4}, encrypted accuracy {:.4}",
                    r.samples, r.cleartext_accuracy, r.encrypted_accuracy
                );
                print!("{}", r.agreement);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: cannot cap worker threads: {e}");
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
