#include "dsm/cli.hpp"

int main(int argc, char** argv) {
    return dsm::cli::dispatch(argc, argv);
}
