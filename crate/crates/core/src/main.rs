fn main() -> std::process::ExitCode {
    midlevel_core::cli::main()
}
