fn main() -> std::process::ExitCode {
    grokbench::cli::main()
}
