fn main() {
    // Placeholder until the CLI lands.
}
