//! `smkd` — masked knowledge distillation training and few-shot evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use smkd::cli::{cmd_eval, cmd_pretrain, cmd_train, cmd_visualize, CliError, Overrides};

const USAGE: &str = "\
usage: smkd <subcommand> [flags]

subcommands:
  pretrain   --config <file> [--init <ckpt>] [--seed N] [--out-dir DIR]
  train      --config <file> --init <ckpt> [--cold-start] [--loss MODE]
             [--lambda X] [--seed N] [--out-dir DIR]
  eval       --config <file> --checkpoint <ckpt> [--episodes N] [--n-way N]
             [--k-shot K] [--mode M[,M..]] [--method M[,M..]] [--seed N]
             [--out-dir DIR]
  visualize  --config <file> --checkpoint <ckpt> --image <ppm> [--image <ppm> ..]
             [--out-dir DIR]

common flags:
  --strict       treat a checkpoint config-hash mismatch as an error
  --out-dir DIR  output directory (default smkd-out)

loss modes: ce | cls | patch | ce+patch | cls+patch
feature modes: cls | avg_pool | weighted_avg_pool, joined with `+`
methods: prototype | classifier

exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure";

struct Args {
    command: String,
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    init: Option<PathBuf>,
    images: Vec<PathBuf>,
    overrides: Overrides,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let command = argv
        .first()
        .ok_or_else(|| CliError::Usage(USAGE.into()))?
        .clone();
    let mut args = Args {
        command,
        config: None,
        checkpoint: None,
        init: None,
        images: Vec::new(),
        overrides: Overrides::default(),
    };

    let mut i = 1;
    let take_value = |i: &mut usize, flag: &str| -> Result<String, CliError> {
        *i += 1;
        argv.get(*i)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("flag {flag} needs a value")))
    };
    let parse_num = |v: String, flag: &str| -> Result<u64, CliError> {
        v.parse()
            .map_err(|_| CliError::Usage(format!("flag {flag}: cannot parse {v:?}")))
    };

    while i < argv.len() {
        let flag = argv[i].as_str();
        match flag {
            "--config" => args.config = Some(PathBuf::from(take_value(&mut i, flag)?)),
            "--checkpoint" => args.checkpoint = Some(PathBuf::from(take_value(&mut i, flag)?)),
            "--init" => args.init = Some(PathBuf::from(take_value(&mut i, flag)?)),
            "--image" => args.images.push(PathBuf::from(take_value(&mut i, flag)?)),
            "--seed" => args.overrides.seed = Some(parse_num(take_value(&mut i, flag)?, flag)?),
            "--episodes" => {
                args.overrides.episodes = Some(parse_num(take_value(&mut i, flag)?, flag)? as usize)
            }
            "--n-way" => {
                args.overrides.n_way = Some(parse_num(take_value(&mut i, flag)?, flag)? as usize)
            }
            "--k-shot" => {
                args.overrides.k_shot = Some(parse_num(take_value(&mut i, flag)?, flag)? as usize)
            }
            "--lambda" => {
                let v = take_value(&mut i, flag)?;
                args.overrides.lambda = Some(v.parse().map_err(|_| {
                    CliError::Usage(format!("flag --lambda: cannot parse {v:?}"))
                })?);
            }
            "--loss" => args.overrides.loss = Some(take_value(&mut i, flag)?),
            "--mode" => args.overrides.mode = Some(take_value(&mut i, flag)?),
            "--method" => args.overrides.method = Some(take_value(&mut i, flag)?),
            "--out-dir" => args.overrides.out_dir = Some(PathBuf::from(take_value(&mut i, flag)?)),
            "--cold-start" => args.overrides.cold_start = true,
            "--strict" => args.overrides.strict = true,
            other => return Err(CliError::Usage(format!("unknown flag {other}\n\n{USAGE}"))),
        }
        i += 1;
    }
    Ok(args)
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let args = parse_args(argv)?;
    let need_config = || {
        args.config
            .clone()
            .ok_or_else(|| CliError::Usage("missing --config".into()))
    };
    let need_checkpoint = || {
        args.checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage("missing --checkpoint".into()))
    };

    match args.command.as_str() {
        "pretrain" => {
            let ckpt = cmd_pretrain(&need_config()?, args.init.as_deref(), &args.overrides)?;
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        "train" => {
            if args.init.is_none() && !args.overrides.cold_start {
                return Err(CliError::Usage(
                    "train needs --init <ckpt> (or --cold-start to reproduce the collapse ablation)"
                        .into(),
                ));
            }
            let ckpt = cmd_train(&need_config()?, args.init.as_deref(), &args.overrides)?;
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        "eval" => cmd_eval(&need_checkpoint()?, &need_config()?, &args.overrides),
        "visualize" => {
            if args.images.is_empty() {
                return Err(CliError::Usage("visualize needs at least one --image".into()));
            }
            let written = cmd_visualize(
                &need_checkpoint()?,
                &need_config()?,
                &args.images,
                &args.overrides,
            )?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other:?}\n\n{USAGE}"
        ))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
