use clap::Parser;
use compass_service::cli::{run, Cli};
use compass_service::ErrorBody;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        let body = match e.downcast_ref::<compass_core::CompassError>() {
            Some(c) => ErrorBody::from_core("", c),
            None if e.chain().any(|c| c.is::<serde_json::Error>()) => ErrorBody::new("config", format!("{e:#}")),
            None if e.chain().any(|c| c.is::<std::io::Error>()) => ErrorBody::new("io", format!("{e:#}")),
            None => ErrorBody::new("error", format!("{e:#}")),
        };
        eprintln!("{}", body.to_json());
        std::process::exit(1);
    }
}
