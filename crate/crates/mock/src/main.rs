use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use biasaudit::corpus::read_instances;
use biasaudit::synthetic::NoisyDetector;
use biasaudit_mock::{spawn, AnswerMode, MockConfig};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Perfect,
    Noisy,
    Fixed,
}

/// Deterministic chat-completion and embedding server.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:0")]
    addr: SocketAddr,
    /// Instances file whose gold labels are the reference answers.
    #[arg(long)]
    answers: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "perfect")]
    mode: Mode,
    /// Reply used in fixed mode.
    #[arg(long, default_value = "S10")]
    reply: String,
    /// Miss rate of biased texts in noisy mode.
    #[arg(long, default_value_t = 0.1)]
    fnr: f64,
    /// Flag rate of unbiased texts in noisy mode.
    #[arg(long, default_value_t = 0.1)]
    fpr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    fail_first: u64,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let mut config = MockConfig {
        mode: match args.mode {
            Mode::Perfect => AnswerMode::Perfect,
            Mode::Noisy => AnswerMode::Noisy(NoisyDetector::new(args.fnr, args.fpr, args.seed)),
            Mode::Fixed => AnswerMode::Fixed(args.reply.clone()),
        },
        fail_first: args.fail_first,
        delay: Duration::from_millis(args.delay_ms),
        embedding_dim: args.dim,
        ..MockConfig::default()
    };
    if let Some(path) = &args.answers {
        let instances = read_instances(path)?;
        config = config.with_answers(&instances);
    }
    let (addr, _) = spawn(config, args.addr).await?;
    println!("listening on http://{addr}");
    tokio::signal::ctrl_c().await?;
    Ok(())
}
