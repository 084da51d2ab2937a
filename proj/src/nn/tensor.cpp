#include "ldm/nn/tensor.hpp"

namespace ldm::nn {

Spatial Spatial::from_dims(const Dims& dims)
{
    check_dims(dims);
    Spatial s;
    s.nd = static_cast<int>(dims.size());
    for (std::size_t a = 0; a < dims.size(); ++a)
        s.ext[a] = static_cast<int>(dims[a]);
    return s;
}

Spatial Spatial::halved() const
{
    Spatial s = *this;
    for (int a = 0; a < nd; ++a)
        s.ext[a] /= 2;
    return s;
}

Spatial Spatial::doubled() const
{
    Spatial s = *this;
    for (int a = 0; a < nd; ++a)
        s.ext[a] *= 2;
    return s;
}

FeatureMap FeatureMap::zeros(int channels, int batch, const Spatial& spatial)
{
    return FeatureMap{Matrix::Zero(channels, static_cast<Eigen::Index>(batch) * spatial.size()), batch, spatial};
}

} // namespace ldm::nn
