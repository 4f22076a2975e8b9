use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Generate a throwaway CA plus a broker certificate for local
/// deployments: writes ca.pem, server-cert.pem and server-key.pem.
#[derive(Parser)]
#[command(name = "mqttz-devca", version)]
struct Args {
    /// Directory to write the PEM files into.
    #[arg(long, default_value = "certs")]
    out_dir: PathBuf,

    /// Subject names the certificate must cover (DNS names or IPs).
    #[arg(long = "san", default_values_t = ["localhost".to_string(), "127.0.0.1".to_string()])]
    sans: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match mqttz::tls::generate_dev_tls(&args.out_dir, &args.sans) {
        Ok(files) => {
            println!("ca:   {}", files.ca.display());
            println!("cert: {}", files.cert.display());
            println!("key:  {}", files.key.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("generation failed: {e}");
            ExitCode::FAILURE
        }
    }
}
