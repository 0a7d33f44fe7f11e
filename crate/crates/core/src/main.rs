fn main() -> std::process::ExitCode {
    fewtreat::cli::main()
}
