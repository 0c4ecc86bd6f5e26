fn main() -> std::process::ExitCode {
    crossutt::harness::cli::main()
}
