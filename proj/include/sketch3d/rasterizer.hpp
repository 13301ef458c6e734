#pragma once

#include "sketch3d/geometry.hpp"
#include "sketch3d/tensor.hpp"

#include <stdexcept>
#include <vector>

namespace sketch3d {

class RasterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kDefaultSigma = 1e-4;

// Centre of pixel (row, col) in normalized device coordinates; row 0 is the top.
inline double pixel_center_x(std::size_t col, std::size_t width)
{
    return (2.0 * static_cast<double>(col) + 1.0) / static_cast<double>(width) - 1.0;
}
inline double pixel_center_y(std::size_t row, std::size_t height)
{
    return 1.0 - (2.0 * static_cast<double>(row) + 1.0) / static_cast<double>(height);
}

// Soft silhouette of projected triangles: [V, 2] NDC positions -> [res, res] in (0, 1).
// Each face contributes sigmoid(sign * d^2 / sigma), d being the distance from the
// pixel centre to the face's boundary, and faces combine as 1 - prod(1 - D_j).
Tensor soft_rasterize(const Tensor& ndc, const std::vector<Face>& faces, std::size_t resolution,
                      double sigma = kDefaultSigma);
// view_transform -> project -> soft_rasterize, differentiable w.r.t. the vertices
// and the pose embedding.
Tensor soft_render(const Mesh& mesh, const Tensor& pose_embedding, std::size_t resolution,
                   double sigma = kDefaultSigma, double distance = kCameraDistance);
Tensor soft_render(const Mesh& mesh, const CameraPose& pose, std::size_t resolution, double sigma = kDefaultSigma);

// Binary silhouette: a pixel is set when its centre is inside a projected face
// (edge functions with a top-left tie rule). Not differentiable.
Tensor hard_rasterize(const Tensor& ndc, const std::vector<Face>& faces, std::size_t resolution);
Tensor hard_render(const Mesh& mesh, const CameraPose& pose, std::size_t resolution);

// Level 0 is the input; every further level halves the resolution by 2x2 averaging.
std::vector<Tensor> silhouette_pyramid(const Tensor& silhouette, std::size_t levels);

}  // namespace sketch3d
