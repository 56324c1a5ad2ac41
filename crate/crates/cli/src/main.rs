fn main() -> std::process::ExitCode {
    referral_forge_cli::cli::main()
}
