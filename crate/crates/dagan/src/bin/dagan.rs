fn main() {
    std::process::exit(dagan::cli::run());
}
