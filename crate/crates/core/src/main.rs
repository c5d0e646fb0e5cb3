fn main() -> std::process::ExitCode {
    lkca_core::cli::main()
}
