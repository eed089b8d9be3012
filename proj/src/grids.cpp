#include "segcomp/grids.hpp"

namespace segcomp {

const char* map_kind_name(MapKind kind) {
    switch (kind) {
        case MapKind::beta: return "beta";
        case MapKind::sigma2: return "sigma2";
        case MapKind::u: return "u";
        case MapKind::e: return "e";
    }
    return "?";
}

std::vector<std::string> default_class_names(int num_classes) {
    std::vector<std::string> names;
    names.reserve(num_classes);
    for (int c = 0; c < num_classes; ++c) names.push_back("class" + std::to_string(c));
    return names;
}

}  // namespace segcomp
