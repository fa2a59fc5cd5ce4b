fn main() -> std::process::ExitCode {
    poseedit::cli::main()
}
