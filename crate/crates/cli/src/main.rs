fn main() {
    std::process::exit(cvar_cli::run(std::env::args_os()));
}
