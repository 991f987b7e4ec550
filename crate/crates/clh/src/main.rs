fn main() -> std::process::ExitCode {
    clh::cli::main()
}
