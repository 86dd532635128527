"""Algorithm family: returns/advantages, losses and agents."""
from .base import (ALGORITHMS, DISCRETE_ONLY, ON_POLICY, Agent, AgentSpec, AlgorithmSpec, ExploreSpec,
                   NonFiniteLossError, RandomAgent, linear_decay)
from .dqn import DQN
from .policy_gradient import PPO, ActorCritic, Reinforce
from .sac import SAC

AGENTS = {
    "reinforce": Reinforce,
    "a2c_nstep": ActorCritic,
    "a2c_gae": ActorCritic,
    "ppo": PPO,
    "dqn": DQN,
    "ddqn_per": DQN,
    "sac": SAC,
}


def make_agent(spec: AgentSpec, obs_dim, action_space, rng, num_lanes=1, max_frame=0) -> Agent:
    return AGENTS[spec.algorithm.name](spec, obs_dim, action_space, rng, num_lanes=num_lanes, max_frame=max_frame)


__all__ = [
    "ALGORITHMS", "DISCRETE_ONLY", "ON_POLICY", "AGENTS", "Agent", "AgentSpec", "AlgorithmSpec",
    "ExploreSpec", "NonFiniteLossError", "RandomAgent", "linear_decay", "make_agent",
    "DQN", "PPO", "ActorCritic", "Reinforce", "SAC",
]
