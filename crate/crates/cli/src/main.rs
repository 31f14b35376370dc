fn main() {
    std::process::exit(bikeflow::run(std::env::args_os()));
}
