#include "patchlm/cli.hpp"

int main(int argc, char** argv) { return patchlm::dispatch(argc, argv); }
