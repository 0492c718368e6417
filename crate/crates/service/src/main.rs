fn main() {
    std::process::exit(oga_service::cli::main());
}
