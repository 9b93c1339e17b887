//! Thin command-line front end; all logic lives in the library commands.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
//! file-format error.

use std::path::PathBuf;
use std::process::ExitCode;

use convexp::commands::{
    cmd_fig1, cmd_fig4, cmd_invertcheck, cmd_train, cmd_verify, DatasetId, Fig1Config, Fig4Config,
    InvertCheckConfig, ModelPreset, TrainConfig, VerifyConfig, VerifyScope,
};
use convexp::error::Error;

const USAGE: &str = "\
convexp <command> [flags]

Commands:
  fig1         materialize a conv equivalent matrix and its exponential
               (CSV + PGM), verify the implicit series against it
               flags: --seed N --out DIR [--zero-kernel]
  fig4         per-term norm bounds vs measured series terms, as CSV
               flags: --norms a,b,.. --terms N --seed N --out DIR
  verify       run the invariant suites at desk scale
               flags: --scope all|expm|sylvester|graph|equivariance
                      --seed N [--out DIR] [--inject-bug NAME]
  train        train a flow on a synthetic density
               flags: --dataset mog4|mog9|mog16|mogring|moons2d
                      --model coupling|graphflow|graphflow+exp|convsylvester2d
                      --iters N --batch N --lr F --seed N --out DIR
  invertcheck  round-trip a saved model and report fixed-point iterations
               flags: --model-file PATH --samples N --tolerance F --seed N

Common flags:
  --config PATH       load a previously dumped JSON config (other flags ignored)
  --dump-config PATH  write the resolved config to PATH and exit
";

struct Flags {
    map: Vec<(String, Option<String>)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut map = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            if !a.starts_with("--") {
                return Err(format!("unexpected argument {a:?}"));
            }
            let key = a[2..].to_string();
            // boolean flags take no value
            let boolean = matches!(key.as_str(), "zero-kernel");
            if boolean {
                map.push((key, None));
                i += 1;
            } else {
                let val = args
                    .get(i + 1)
                    .ok_or_else(|| format!("flag --{key} needs a value"))?;
                map.push((key, Some(val.clone())));
                i += 2;
            }
        }
        Ok(Flags { map })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.as_deref())
    }

    fn has(&self, key: &str) -> bool {
        self.map.iter().any(|(k, _)| k == key)
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, String> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|_| format!("bad --{key} value {v:?}")),
            None => Ok(default),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, String> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|_| format!("bad --{key} value {v:?}")),
            None => Ok(default),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, String> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|_| format!("bad --{key} value {v:?}")),
            None => Ok(default),
        }
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or(default))
    }
}

fn load_config<C: serde::de::DeserializeOwned>(path: &str) -> Result<C, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))
}

fn dump_config<C: serde::Serialize>(cfg: &C, path: &str) -> Result<(), Error> {
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::ModelFormat(_) => 3,
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run() -> Result<u8, (u8, String)> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = args.first() else {
        return Err((2, USAGE.to_string()));
    };
    let flags = Flags::parse(&args[1..]).map_err(|e| (2, format!("{e}\n\n{USAGE}")))?;

    macro_rules! finish_config {
        ($cfg:expr) => {
            if let Some(path) = flags.get("dump-config") {
                dump_config(&$cfg, path).map_err(|e| (error_code(&e), e.to_string()))?;
                return Ok(0);
            }
        };
    }

    match cmd.as_str() {
        "fig1" => {
            let cfg: Fig1Config = match flags.get("config") {
                Some(p) => load_config(p).map_err(|e| (error_code(&e), e.to_string()))?,
                None => Fig1Config {
                    seed: flags.u64_or("seed", 0).map_err(|e| (2, e))?,
                    zero_kernel: flags.has("zero-kernel"),
                    out_dir: flags.out_dir("fig1_out"),
                },
            };
            finish_config!(cfg);
            let report = cmd_fig1(&cfg).map_err(|e| (error_code(&e), e.to_string()))?;
            println!("equivalent matrix written to {}", cfg.out_dir.display());
            println!("trace(M) = {}", report.m_trace);
            println!(
                "max |implicit - dense| over probes = {:.3e}",
                report.max_error
            );
            Ok(0)
        }
        "fig4" => {
            let cfg: Fig4Config = match flags.get("config") {
                Some(p) => load_config(p).map_err(|e| (error_code(&e), e.to_string()))?,
                None => {
                    let norms: Vec<f64> = flags
                        .get("norms")
                        .unwrap_or("0.5,0.9,2.0,3.0")
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| (2, format!("bad --norms: {e}")))?;
                    Fig4Config {
                        norms,
                        max_terms: flags.usize_or("terms", 25).map_err(|e| (2, e))?,
                        seed: flags.u64_or("seed", 0).map_err(|e| (2, e))?,
                        out_dir: flags.out_dir("fig4_out"),
                    }
                }
            };
            finish_config!(cfg);
            let path = cmd_fig4(&cfg).map_err(|e| (error_code(&e), e.to_string()))?;
            println!("convergence table written to {}", path.display());
            Ok(0)
        }
        "verify" => {
            let cfg: VerifyConfig = match flags.get("config") {
                Some(p) => load_config(p).map_err(|e| (error_code(&e), e.to_string()))?,
                None => {
                    let scope = match flags.get("scope").unwrap_or("all") {
                        "all" => VerifyScope::All,
                        "expm" => VerifyScope::Expm,
                        "sylvester" => VerifyScope::Sylvester,
                        "graph" => VerifyScope::Graph,
                        "equivariance" => VerifyScope::Equivariance,
                        other => return Err((2, format!("unknown scope {other:?}"))),
                    };
                    VerifyConfig {
                        scope,
                        seed: flags.u64_or("seed", 0).map_err(|e| (2, e))?,
                        out_dir: flags.get("out").map(PathBuf::from),
                        inject_bug: flags.get("inject-bug").map(|s| s.to_string()),
                    }
                }
            };
            finish_config!(cfg);
            let report = cmd_verify(&cfg).map_err(|e| (error_code(&e), e.to_string()))?;
            for row in &report.rows {
                println!(
                    "[{}] {}::{} worst {:.3e} (tolerance {:.1e})",
                    if row.pass { "pass" } else { "FAIL" },
                    row.module,
                    row.property,
                    row.worst,
                    row.tolerance
                );
            }
            if report.passed {
                println!("all {} properties hold", report.rows.len());
                Ok(0)
            } else {
                let failed = report.rows.iter().filter(|r| !r.pass).count();
                println!("{failed} properties FAILED");
                Ok(1)
            }
        }
        "train" => {
            let cfg: TrainConfig = match flags.get("config") {
                Some(p) => load_config(p).map_err(|e| (error_code(&e), e.to_string()))?,
                None => {
                    let dataset = flags
                        .get("dataset")
                        .and_then(DatasetId::parse)
                        .ok_or((2, "missing or unknown --dataset".to_string()))?;
                    let model = flags
                        .get("model")
                        .and_then(ModelPreset::parse)
                        .ok_or((2, "missing or unknown --model".to_string()))?;
                    let mut cfg = TrainConfig::new(dataset, model, flags.out_dir("train_out"));
                    cfg.iters = flags.usize_or("iters", cfg.iters).map_err(|e| (2, e))?;
                    cfg.batch = flags.usize_or("batch", cfg.batch).map_err(|e| (2, e))?;
                    cfg.learning_rate =
                        flags.f64_or("lr", cfg.learning_rate).map_err(|e| (2, e))?;
                    cfg.seed = flags.u64_or("seed", cfg.seed).map_err(|e| (2, e))?;
                    cfg.val_every = flags
                        .usize_or("val-every", cfg.val_every)
                        .map_err(|e| (2, e))?;
                    cfg
                }
            };
            finish_config!(cfg);
            let report = cmd_train(&cfg).map_err(|e| (error_code(&e), e.to_string()))?;
            println!(
                "{} on {}: final per-node NLL {:.4} nats after {} iterations ({:.1}s)",
                cfg.model.name(),
                cfg.dataset.name(),
                report.final_per_node_nll,
                report.iters_run,
                report.wall_seconds
            );
            println!("model:   {}", report.model_path.display());
            println!("metrics: {}", report.metrics_path.display());
            Ok(0)
        }
        "invertcheck" => {
            let cfg: InvertCheckConfig = match flags.get("config") {
                Some(p) => load_config(p).map_err(|e| (error_code(&e), e.to_string()))?,
                None => InvertCheckConfig {
                    model_path: PathBuf::from(
                        flags
                            .get("model-file")
                            .ok_or((2, "missing --model-file".to_string()))?,
                    ),
                    samples: flags.usize_or("samples", 256).map_err(|e| (2, e))?,
                    tolerance: flags.f64_or("tolerance", 1e-3).map_err(|e| (2, e))?,
                    seed: flags.u64_or("seed", 0).map_err(|e| (2, e))?,
                    out_dir: flags.get("out").map(PathBuf::from),
                },
            };
            finish_config!(cfg);
            let report = cmd_invertcheck(&cfg).map_err(|e| (error_code(&e), e.to_string()))?;
            println!(
                "max round-trip error: data {:.3e}, latent {:.3e}",
                report.max_data_error, report.max_latent_error
            );
            println!(
                "max fixed-point iterations: {}",
                report.max_fixed_point_iters
            );
            if report.pass {
                println!("within tolerance {:.1e}", cfg.tolerance);
                Ok(0)
            } else {
                println!("tolerance {:.1e} EXCEEDED", cfg.tolerance);
                Ok(1)
            }
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(0)
        }
        other => Err((2, format!("unknown command {other:?}\n\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
