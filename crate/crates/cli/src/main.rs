use std::process::ExitCode;

use capalign_cli::{run, CliError, Output};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(std::env::args_os()) {
        Ok(Output::Json(value)) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("valid JSON value"));
            ExitCode::SUCCESS
        }
        Ok(Output::Text(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (kind, code) = match &err {
                CliError::Usage(_) => ("usage", 2),
                CliError::Runtime(_) => ("runtime", 1),
            };
            let body = serde_json::json!({"error": {"kind": kind, "message": err.to_string()}});
            println!("{}", serde_json::to_string_pretty(&body).expect("valid JSON value"));
            log::error!("{err}");
            ExitCode::from(code)
        }
    }
}
