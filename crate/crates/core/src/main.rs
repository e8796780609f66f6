fn main() {
    std::process::exit(batchverify::cli::main_entry());
}
