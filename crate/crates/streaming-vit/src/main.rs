fn main() {
    std::process::exit(streaming_vit::commands::run());
}
