#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "awmark/tensor.hpp"

int main(int argc, char** argv) {
    awmark::tune_allocator();
    return doctest::Context(argc, argv).run();
}
