fn main() -> std::process::ExitCode {
    raex::cli::main()
}
