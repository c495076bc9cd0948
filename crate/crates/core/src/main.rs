use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ilora::experiment::{apply_cli, load_config, run_experiment};
use ilora::federation::Method;
use ilora::verify::{run_verify, SUITES};

#[derive(Parser)]
#[command(name = "ilora", version, about = "Federated LoRA simulator with heterogeneous client ranks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write one JSON record per round.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Sets the data, partition, training and model seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Metrics file; stdout when neither this nor `output.path` is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named verification suite.
    Verify {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: String,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: ilora::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, method, rounds, out } => load_config(&config)
            .and_then(|spec| apply_cli(spec, seed, method, rounds, out))
            .and_then(|spec| run_experiment(&spec, &mut std::io::stdout().lock()))
            .map(|records| {
                eprintln!("{} records written", records.len());
                true
            }),
        Command::Verify { suite } => run_verify(&suite).map(|report| {
            println!("{report}");
            report.passed()
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
