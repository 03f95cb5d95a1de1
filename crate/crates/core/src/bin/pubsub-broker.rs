//! Standalone broker process serving the socket protocol.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use pubsub_core::broker::{Broker, BrokerConfig, DEFAULT_BITMAP_WIDTH};
use pubsub_core::proto::{socket_path, BrokerServer};

#[derive(Parser)]
#[command(about = "Metadata broker for pubsub-lifetimes clients")]
struct Args {
    /// Socket path; defaults to $PUBSUB_BROKER_SOCK or /tmp/pubsub-lifetimes.sock.
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Bitmap width, i.e. the endpoint id budget per topic.
    #[arg(long, default_value_t = DEFAULT_BITMAP_WIDTH)]
    max_subscribers_per_topic: usize,
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    let path = args.socket.unwrap_or_else(socket_path);
    let broker = Arc::new(Broker::new(BrokerConfig {
        max_subscribers_per_topic: args.max_subscribers_per_topic,
        ..BrokerConfig::default()
    }));
    let server = match BrokerServer::bind(&path, broker) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot listen on {}: {e}", path.display());
            std::process::exit(1);
        }
    };
    log::info!("listening on {}", path.display());
    server.serve();
}
