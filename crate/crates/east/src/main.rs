fn main() {
    std::process::exit(east::cli_main());
}
