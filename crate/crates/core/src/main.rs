fn main() -> std::process::ExitCode {
    gasnet::cli::main()
}
