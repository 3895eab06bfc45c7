fn main() {
    std::process::exit(dlfl::cli::main_exit_code());
}
