fn main() -> std::process::ExitCode {
    mocobot::cli::main()
}
