fn main() {
    std::process::exit(replayforge::cli::main_entry());
}
