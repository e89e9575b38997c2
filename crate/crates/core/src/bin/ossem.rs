fn main() -> std::process::ExitCode {
    ossem::cli::main_with(std::env::args())
}
