#pragma once

#include "sfd/checkpoint.hpp"
#include "sfd/common.hpp"
#include "sfd/eps_model.hpp"
#include "sfd/eval.hpp"
#include "sfd/model.hpp"
#include "sfd/process.hpp"
#include "sfd/rng.hpp"
#include "sfd/schedule.hpp"
#include "sfd/solver.hpp"
#include "sfd/trainer.hpp"
