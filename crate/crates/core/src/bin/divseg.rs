fn main() -> std::process::ExitCode {
    divseg::cli::main_entry()
}
