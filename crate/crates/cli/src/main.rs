fn main() {
    std::process::exit(cofinetune_cli::run());
}
