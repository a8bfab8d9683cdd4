fn main() -> std::process::ExitCode {
    tessera::cli::main_with(std::env::args_os())
}
