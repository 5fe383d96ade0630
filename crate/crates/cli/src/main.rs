fn main() {
    let level = match paedid_cli::log_level(std::env::var("PAEDID_LOG").ok().as_deref()) {
        Ok(level) => level,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    env_logger::Builder::new().filter_level(level).init();
    std::process::exit(paedid_cli::main_with_args(std::env::args_os()));
}
