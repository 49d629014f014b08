// Regenerates the desk retrieval corpus: 10 scene groups x 3 views as IMG1 rasters
// plus the matching ground-truth file.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "qcnn/retrieval.hpp"
#include "qcnn/synthetic.hpp"

int main(int argc, char** argv) {
    if (argc < 2 || argc > 3) {
        std::cerr << "usage: make_fixtures <out-dir> [seed]\n";
        return 1;
    }
    const std::filesystem::path dir = argv[1];
    const std::uint64_t seed = argc == 3 ? std::strtoull(argv[2], nullptr, 10) : 7;
    try {
        std::filesystem::create_directories(dir);
        const auto corpus = qcnn::synth::retrieval_corpus(10, 3, seed);
        for (const auto& img : corpus) qcnn::save_image(dir / (img.id + ".img"), img.image);
        const qcnn::Dataset ds = qcnn::ingest_dataset(dir);
        qcnn::write_text_file(dir / "gt.txt", qcnn::format_ground_truth(ds.ground_truth));
        std::cout << "wrote " << corpus.size() << " images and " << ds.ground_truth.size() << " queries to " << dir << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
