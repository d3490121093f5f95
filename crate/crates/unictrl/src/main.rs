use std::process::ExitCode;

fn main() -> ExitCode {
    match unictrl::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if e.category() == "usage" { 2 } else { 1 })
        }
    }
}
