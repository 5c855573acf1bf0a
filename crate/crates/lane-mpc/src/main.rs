use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lane_mpc::cli;
use lane_mpc::control::ControllerKind;

#[derive(Parser)]
#[command(
    name = "lane-mpc",
    about = "Closed-loop lane-following testbench: lane detection, MPC and PID on a bicycle-model plant",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Mpc,
    Pid,
}

impl From<Controller> for ControllerKind {
    fn from(c: Controller) -> Self {
        match c {
            Controller::Mpc => ControllerKind::Mpc,
            Controller::Pid => ControllerKind::Pid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the lane-detection pipeline on a PPM image and dump every stage
    Detect {
        /// input image (binary PPM, P6)
        image: PathBuf,
        /// configuration file (defaults to built-in values)
        #[arg(long, env = "LANE_MPC_CONFIG")]
        config: Option<PathBuf>,
        /// output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one closed-loop scenario and write trace, metrics and plots
    Simulate {
        #[arg(long, env = "LANE_MPC_CONFIG")]
        config: Option<PathBuf>,
        /// steering controller
        #[arg(long, value_enum, default_value_t = Controller::Mpc)]
        controller: Controller,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// overrides the scenario seed
        #[arg(long)]
        seed: Option<u64>,
        /// additionally dump the vision stages of the first frame
        #[arg(long)]
        debug_dumps: bool,
    },
    /// Run MPC and PID on the identical scenario and write a comparison report
    Compare {
        #[arg(long, env = "LANE_MPC_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Project a synthetic checkerboard and verify homography estimation
    CalibrateCheck {
        #[arg(long, env = "LANE_MPC_CONFIG")]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let code = match args.command {
        Command::Detect { image, config, out } => {
            cli::cmd_detect(&image, config.as_deref(), &out)
        }
        Command::Simulate {
            config,
            controller,
            out,
            seed,
            debug_dumps,
        } => cli::cmd_simulate(config.as_deref(), controller.into(), &out, seed, debug_dumps),
        Command::Compare { config, out, seed } => {
            cli::cmd_compare(config.as_deref(), &out, seed)
        }
        Command::CalibrateCheck { config } => cli::cmd_calibrate_check(config.as_deref()),
    };
    ExitCode::from(code as u8)
}
